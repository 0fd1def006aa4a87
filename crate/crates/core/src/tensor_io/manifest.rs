use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use super::{npy, LayerActivations, TensorError};

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("malformed manifest: {0}")]
    Malformed(String),
    #[error("missing file: {}", .0.display())]
    MissingFile(PathBuf),
    #[error(
        "layer {layer} {modality} tensor {} has {found} columns, manifest hidden_dim is {expected}",
        path.display()
    )]
    ShapeMismatch {
        layer: usize,
        modality: &'static str,
        path: PathBuf,
        expected: usize,
        found: usize,
    },
    #[error("layer {layer} {modality} tensor {} has {rows} rows; at least 2 are required", path.display())]
    TooFewRows {
        layer: usize,
        modality: &'static str,
        path: PathBuf,
        rows: usize,
    },
    #[error("layer {layer} {modality} tensor {}: {source}", path.display())]
    Tensor {
        layer: usize,
        modality: &'static str,
        path: PathBuf,
        #[source]
        source: TensorError,
    },
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// One decoder layer's pair of tensor files. Paths are relative to the
/// manifest's directory unless absolute.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerEntry {
    pub index: usize,
    pub vision: String,
    pub text: String,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

/// Optional dump of the embedding output, addressed as layer 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingEntry {
    pub vision: String,
    pub text: String,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

/// Metadata binding the per-layer tensor files of one extraction run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub model_id: String,
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub num_pairs: usize,
    pub layers: Vec<LayerEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding: Option<EmbeddingEntry>,
    /// Unknown keys, kept so a rewrite does not drop them.
    #[serde(flatten)]
    pub extra: Map<String, Value>,
    #[serde(skip)]
    base_dir: PathBuf,
}

impl RunManifest {
    pub fn new(model_id: impl Into<String>, hidden_dim: usize, num_pairs: usize, layers: Vec<LayerEntry>) -> Self {
        Self {
            model_id: model_id.into(),
            hidden_dim,
            num_layers: layers.len(),
            num_pairs,
            layers,
            embedding: None,
            extra: Map::new(),
            base_dir: PathBuf::new(),
        }
    }

    /// Parses manifest JSON and checks everything that does not need the
    /// filesystem: positive sizes and contiguous 1-based layer indices.
    pub fn from_json_str(text: &str) -> Result<Self, ManifestError> {
        let manifest: RunManifest =
            serde_json::from_str(text).map_err(|e| ManifestError::Malformed(e.to_string()))?;
        manifest.check_structure()?;
        Ok(manifest)
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    fn check_structure(&self) -> Result<(), ManifestError> {
        let malformed = |msg: String| Err(ManifestError::Malformed(msg));
        if self.hidden_dim == 0 {
            return malformed("hidden_dim must be positive".into());
        }
        if self.num_layers == 0 {
            return malformed("num_layers must be positive".into());
        }
        if self.num_pairs == 0 {
            return malformed("num_pairs must be positive".into());
        }
        if self.layers.len() != self.num_layers {
            return malformed(format!(
                "num_layers is {} but {} layer entries are listed",
                self.num_layers,
                self.layers.len()
            ));
        }
        for (pos, entry) in self.layers.iter().enumerate() {
            if entry.index != pos + 1 {
                return malformed(format!(
                    "layer indices must be contiguous from 1; entry {pos} has index {}",
                    entry.index
                ));
            }
        }
        Ok(())
    }

    pub fn base_dir(&self) -> &Path {
        &self.base_dir
    }

    pub fn set_base_dir(&mut self, dir: impl Into<PathBuf>) {
        self.base_dir = dir.into();
    }

    pub fn resolve(&self, relative: &str) -> PathBuf {
        self.base_dir.join(relative)
    }

    /// Vision and text paths for a layer index; 0 addresses the embedding dump.
    pub fn layer_paths(&self, index: usize) -> Option<(PathBuf, PathBuf)> {
        if index == 0 {
            let e = self.embedding.as_ref()?;
            return Some((self.resolve(&e.vision), self.resolve(&e.text)));
        }
        let e = self.layers.get(index - 1)?;
        Some((self.resolve(&e.vision), self.resolve(&e.text)))
    }

    fn indices_with_files(&self) -> impl Iterator<Item = usize> + '_ {
        self.embedding
            .as_ref()
            .map(|_| 0)
            .into_iter()
            .chain(self.layers.iter().map(|e| e.index))
    }

    /// Opens every tensor header and checks column count and row count.
    pub fn check_files(&self) -> Result<(), ManifestError> {
        for layer in self.indices_with_files() {
            let (vision, text) = self.layer_paths(layer).expect("index from manifest");
            for (modality, path) in [("vision", vision), ("text", text)] {
                if !path.is_file() {
                    return Err(ManifestError::MissingFile(path));
                }
                let header = npy::read_tensor_header(&path).map_err(|source| ManifestError::Tensor {
                    layer,
                    modality,
                    path: path.clone(),
                    source,
                })?;
                if header.cols != self.hidden_dim {
                    return Err(ManifestError::ShapeMismatch {
                        layer,
                        modality,
                        path,
                        expected: self.hidden_dim,
                        found: header.cols,
                    });
                }
                if header.rows < 2 {
                    return Err(ManifestError::TooFewRows {
                        layer,
                        modality,
                        path,
                        rows: header.rows,
                    });
                }
            }
        }
        Ok(())
    }

    /// Loads both tensors of one layer.
    pub fn load_layer(&self, index: usize) -> Result<LayerActivations, ManifestError> {
        let (vision_path, text_path) = self
            .layer_paths(index)
            .ok_or_else(|| ManifestError::Malformed(format!("manifest has no layer {index}")))?;
        let load = |modality: &'static str, path: PathBuf| {
            npy::read_tensor(&path).map_err(|source| ManifestError::Tensor {
                layer: index,
                modality,
                path,
                source,
            })
        };
        let vision = load("vision", vision_path.clone())?;
        let text = load("text", text_path.clone())?;
        for (modality, path, t) in [("vision", vision_path, &vision), ("text", text_path, &text)] {
            if t.cols() != self.hidden_dim {
                return Err(ManifestError::ShapeMismatch {
                    layer: index,
                    modality,
                    path,
                    expected: self.hidden_dim,
                    found: t.cols(),
                });
            }
        }
        Ok(LayerActivations::new(index, vision, text).expect("columns and finiteness checked on load"))
    }
}

/// Reads and fully validates a manifest, including every referenced tensor
/// header. Relative paths resolve against the manifest's directory.
pub fn read_manifest(path: impl AsRef<Path>) -> Result<RunManifest, ManifestError> {
    let path = path.as_ref();
    if !path.is_file() {
        return Err(ManifestError::MissingFile(path.to_path_buf()));
    }
    let text = fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::InvalidData => ManifestError::Malformed("manifest is not UTF-8".into()),
        _ => ManifestError::Io {
            path: path.to_path_buf(),
            source: e,
        },
    })?;
    let mut manifest = RunManifest::from_json_str(&text)?;
    manifest.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    manifest.check_files()?;
    Ok(manifest)
}

pub fn write_manifest(manifest: &RunManifest, path: impl AsRef<Path>) -> Result<(), ManifestError> {
    let path = path.as_ref();
    let mut text = manifest.to_json_string();
    text.push('\n');
    fs::write(path, text).map_err(|source| ManifestError::Io {
        path: path.to_path_buf(),
        source,
    })
}
