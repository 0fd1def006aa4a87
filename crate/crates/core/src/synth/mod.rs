//! Seeded Gaussian fixtures with analytic ground-truth distances.
//!
//! Each layer samples `r` vision and `s` text tokens from Gaussians described
//! by a [`LayerSpec`]. The returned oracle values are the Fréchet distances of
//! the generating distributions, before any text-centric scaling.

mod rng;
mod schedule;

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::matsqrt::{self, SqrtError};
use crate::tensor_io::{self, LayerActivations, LayerEntry, ManifestError, RunManifest, Tensor2, TensorError};

pub use rng::{GaussianStream, GENERATOR_ID};
pub use schedule::{
    decreasing_offsets, parse_schedule, preset, CovSpec, GaussianSpec, LayerSpec, MeanSpec, OutlierInjection,
    Schedule, PRESETS,
};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Sqrt(#[from] SqrtError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Everything needed to regenerate a fixture byte for byte.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub hidden_dim: usize,
    pub vision_tokens: usize,
    pub text_tokens: usize,
    pub seed: u64,
    pub layers: Vec<LayerSpec>,
}

impl SynthSpec {
    pub fn new(hidden_dim: usize, tokens: (usize, usize), seed: u64, schedule: Schedule) -> Self {
        Self {
            hidden_dim,
            vision_tokens: tokens.0,
            text_tokens: tokens.1,
            seed,
            layers: schedule.layers,
        }
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        if self.hidden_dim == 0 {
            return Err(SynthError::InvalidSpec("hidden_dim must be positive".into()));
        }
        if self.layers.is_empty() {
            return Err(SynthError::InvalidSpec("schedule has no layers".into()));
        }
        if self.vision_tokens < 2 || self.text_tokens < 2 {
            return Err(SynthError::InvalidSpec("need at least 2 tokens per modality".into()));
        }
        for (k, layer) in self.layers.iter().enumerate() {
            layer
                .validate(self.hidden_dim)
                .map_err(|e| SynthError::InvalidSpec(format!("layer {}: {e}", k + 1)))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Modality {
    Vision = 0,
    Text = 1,
}

/// Stream ids: each (layer, modality) has one stream for token samples and
/// one for covariance construction.
fn sample_stream(layer: usize, m: Modality) -> u64 {
    4 * layer as u64 + m as u64
}

fn covariance_stream(layer: usize, m: Modality) -> u64 {
    4 * layer as u64 + 2 + m as u64
}

/// Haar-distributed orthogonal matrix from the QR of a Gaussian matrix, with
/// the sign convention that makes `R` have a positive diagonal.
fn random_orthogonal(dim: usize, g: &mut GaussianStream) -> DMatrix<f64> {
    let a = DMatrix::from_fn(dim, dim, |_, _| g.normal());
    let qr = a.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..dim {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

fn rotate(diag: &[f64], q: &DMatrix<f64>) -> DMatrix<f64> {
    let d = diag.len();
    let scaled = DMatrix::from_fn(d, d, |i, j| q[(i, j)] * diag[j]);
    let m = scaled * q.transpose();
    (&m + m.transpose()) * 0.5
}

/// Mean vector and covariance matrix of one modality.
pub fn gaussian_parameters(
    spec: &GaussianSpec,
    dim: usize,
    seed: u64,
    stream: u64,
) -> Result<(DVector<f64>, DMatrix<f64>), SynthError> {
    let mean = match &spec.mean {
        MeanSpec::Norm(c) => DVector::from_element(dim, c / (dim as f64).sqrt()),
        MeanSpec::Vector(v) => DVector::from_column_slice(v),
    };
    let cov = match &spec.cov {
        CovSpec::Identity => DMatrix::identity(dim, dim),
        CovSpec::Diagonal(v) => DMatrix::from_diagonal(&DVector::from_column_slice(v)),
        CovSpec::RandomSpd { condition, trace_per_dim } => {
            let mut g = GaussianStream::new(seed, stream);
            let q = random_orthogonal(dim, &mut g);
            let mut eig: Vec<f64> = if dim == 1 {
                vec![1.0]
            } else {
                (0..dim)
                    .map(|i| condition.powf(-(i as f64) / (dim - 1) as f64))
                    .collect()
            };
            let mean_eig = eig.iter().sum::<f64>() / dim as f64;
            eig.iter_mut().for_each(|e| *e *= trace_per_dim / mean_eig);
            rotate(&eig, &q)
        }
        CovSpec::RotatedDiagonal(v) => {
            let mut g = GaussianStream::new(seed, stream);
            let q = random_orthogonal(dim, &mut g);
            rotate(v, &q)
        }
        CovSpec::Full(rows) => DMatrix::from_fn(dim, dim, |i, j| rows[i][j]),
    };
    Ok((mean, cov))
}

/// Closed-form Fréchet distance between `N(μ1, Σ1)` and `N(μ2, Σ2)`, using
/// the exact symmetric square root `(Σ2^½ Σ1 Σ2^½)^½`.
pub fn analytic_gaussian_fid(
    mean1: &DVector<f64>,
    cov1: &DMatrix<f64>,
    mean2: &DVector<f64>,
    cov2: &DMatrix<f64>,
) -> Result<f64, SqrtError> {
    let root2 = matsqrt::sqrt_psd_exact(cov2)?;
    let inner = &root2 * cov1 * &root2;
    let inner = (&inner + inner.transpose()) * 0.5;
    let cross = matsqrt::sqrt_psd_exact(&inner)?.trace();
    Ok((mean1 - mean2).norm_squared() + cov1.trace() + cov2.trace() - 2.0 * cross)
}

fn sample(
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
    rows: usize,
    scale: f64,
    g: &mut GaussianStream,
) -> Result<DMatrix<f64>, SynthError> {
    let dim = mean.len();
    let chol = cov
        .clone()
        .cholesky()
        .ok_or_else(|| SynthError::InvalidSpec("covariance is not positive definite".into()))?;
    let l = chol.l();
    let mut out = DMatrix::zeros(rows, dim);
    let mut z = DVector::zeros(dim);
    for r in 0..rows {
        z.iter_mut().for_each(|v| *v = g.normal());
        let x = mean + &l * &z;
        for c in 0..dim {
            out[(r, c)] = x[c] * scale;
        }
    }
    Ok(out)
}

/// One layer's tokens and its oracle distance. `layer` is 1-based.
pub fn sample_layer(spec: &SynthSpec, layer: usize) -> Result<(LayerActivations, f64), SynthError> {
    let ls = spec
        .layers
        .get(layer.wrapping_sub(1))
        .ok_or_else(|| SynthError::InvalidSpec(format!("no layer {layer}")))?;
    ls.validate(spec.hidden_dim)?;
    let d = spec.hidden_dim;
    let (mean_v, cov_v) = gaussian_parameters(&ls.vision, d, spec.seed, covariance_stream(layer, Modality::Vision))?;
    let (mean_t, cov_t) = gaussian_parameters(&ls.text, d, spec.seed, covariance_stream(layer, Modality::Text))?;

    let mut gv = GaussianStream::new(spec.seed, sample_stream(layer, Modality::Vision));
    let mut vision = sample(&mean_v, &cov_v, spec.vision_tokens, ls.scale, &mut gv)?;
    if let Some(inj) = ls.vision_outliers {
        let count = (inj.fraction * spec.vision_tokens as f64).round() as usize;
        // Partial Fisher–Yates picks `count` distinct rows.
        let mut idx: Vec<usize> = (0..spec.vision_tokens).collect();
        for i in 0..count {
            let j = i + gv.below(spec.vision_tokens - i);
            idx.swap(i, j);
            vision.row_mut(idx[i]).scale_mut(inj.factor);
        }
    }
    let mut gt = GaussianStream::new(spec.seed, sample_stream(layer, Modality::Text));
    let text = sample(&mean_t, &cov_t, spec.text_tokens, ls.scale, &mut gt)?;

    let oracle = analytic_gaussian_fid(&mean_v, &cov_v, &mean_t, &cov_t)? * ls.scale * ls.scale;
    let activations = LayerActivations::new(layer, Tensor2::from_matrix(&vision), Tensor2::from_matrix(&text))
        .map_err(|e| SynthError::InvalidSpec(e.to_string()))?;
    Ok((activations, oracle))
}

/// All layers in memory, generated in parallel from independent streams.
pub fn generate_layers(spec: &SynthSpec) -> Result<(Vec<LayerActivations>, Vec<f64>), SynthError> {
    spec.validate()?;
    let results: Vec<_> = (1..=spec.num_layers())
        .into_par_iter()
        .map(|k| sample_layer(spec, k))
        .collect();
    let mut layers = Vec::with_capacity(results.len());
    let mut oracle = Vec::with_capacity(results.len());
    for r in results {
        let (l, f) = r?;
        layers.push(l);
        oracle.push(f);
    }
    Ok((layers, oracle))
}

/// Contents of `oracle.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleFile {
    pub per_layer_fid: Vec<f64>,
    pub note: String,
}

pub const ORACLE_NOTE: &str = "raw-distribution FIDs, pre-normalization";

fn layer_file(k: usize, modality: &str) -> String {
    format!("layer_{k:03}_{modality}.npy")
}

/// Writes NPY tensors, `manifest.json` and `oracle.json` into `out_dir`.
pub fn generate_run(spec: &SynthSpec, out_dir: impl AsRef<Path>) -> Result<(RunManifest, Vec<f64>), SynthError> {
    let out_dir = out_dir.as_ref();
    spec.validate()?;
    fs::create_dir_all(out_dir).map_err(|source| SynthError::Io {
        path: out_dir.to_path_buf(),
        source,
    })?;

    let oracle: Vec<f64> = (1..=spec.num_layers())
        .into_par_iter()
        .map(|k| -> Result<f64, SynthError> {
            let (layer, fid) = sample_layer(spec, k)?;
            tensor_io::write_tensor(&layer.vision, out_dir.join(layer_file(k, "vision")))?;
            tensor_io::write_tensor(&layer.text, out_dir.join(layer_file(k, "text")))?;
            Ok(fid)
        })
        .collect::<Result<_, _>>()?;

    let entries = (1..=spec.num_layers())
        .map(|k| LayerEntry {
            index: k,
            vision: layer_file(k, "vision"),
            text: layer_file(k, "text"),
            extra: Default::default(),
        })
        .collect();
    let mut manifest = RunManifest::new("synthetic", spec.hidden_dim, 1, entries);
    manifest.extra.insert("generator".into(), json!(GENERATOR_ID));
    manifest.extra.insert(
        "synth_spec".into(),
        serde_json::to_value(spec).expect("spec serializes"),
    );
    tensor_io::write_manifest(&manifest, out_dir.join("manifest.json"))?;

    let oracle_file = OracleFile {
        per_layer_fid: oracle.clone(),
        note: ORACLE_NOTE.into(),
    };
    let path = out_dir.join("oracle.json");
    let mut text = serde_json::to_string_pretty(&oracle_file).expect("oracle serializes");
    text.push('\n');
    fs::write(&path, text).map_err(|source| SynthError::Io { path, source })?;

    manifest.set_base_dir(out_dir);
    Ok((manifest, oracle))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(name: &str, layers: usize, dim: usize, tokens: usize) -> SynthSpec {
        SynthSpec::new(dim, (tokens, tokens), 1234, preset(name, layers, dim).unwrap())
    }

    #[test]
    fn closed_form_oracles() {
        let z = DVector::zeros(2);
        let m = DVector::from_vec(vec![3.0, 4.0]);
        let i = DMatrix::identity(2, 2);
        assert!((analytic_gaussian_fid(&z, &i, &m, &i).unwrap() - 25.0).abs() < 1e-12);

        let z1 = DVector::zeros(1);
        let a = DMatrix::from_element(1, 1, 4.0);
        let b = DMatrix::from_element(1, 1, 9.0);
        assert!((analytic_gaussian_fid(&z1, &a, &z1, &b).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn preset_oracles() {
        let (_, zero) = generate_layers(&spec("zero-gap", 3, 4, 10)).unwrap();
        assert_eq!(zero, vec![0.0; 3]);
        let (_, dec) = generate_layers(&spec("decreasing", 3, 4, 10)).unwrap();
        for (got, want) in dec.iter().zip([4.0, 1.0, 0.25]) {
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
    }

    #[test]
    fn random_spd_has_requested_condition() {
        let g = GaussianSpec {
            mean: MeanSpec::Norm(0.0),
            cov: CovSpec::RandomSpd { condition: 1e4, trace_per_dim: 1.0 },
        };
        let (_, cov) = gaussian_parameters(&g, 16, 9, 2).unwrap();
        let eig = cov.clone().symmetric_eigenvalues();
        let cond = eig.max() / eig.min();
        assert!((cond / 1e4 - 1.0).abs() < 1e-6, "{cond}");
        assert!((cov.trace() - 16.0).abs() < 1e-9);
    }

    #[test]
    fn same_spec_same_tokens() {
        let s = spec("random-spd", 2, 5, 50);
        let (a, _) = generate_layers(&s).unwrap();
        let (b, _) = generate_layers(&s).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.vision, y.vision);
            assert_eq!(x.text, y.text);
        }
        let mut other = s.clone();
        other.seed += 1;
        let (c, _) = generate_layers(&other).unwrap();
        assert_ne!(a[0].vision, c[0].vision);
    }

    #[test]
    fn outlier_rows_are_scaled() {
        let s = spec("outliers", 1, 4, 1000);
        let mut clean = s.clone();
        clean.layers[0].vision_outliers = None;
        let (noisy, _) = generate_layers(&s).unwrap();
        let (plain, _) = generate_layers(&clean).unwrap();
        let changed = (0..1000)
            .filter(|&r| noisy[0].vision.row(r) != plain[0].vision.row(r))
            .count();
        assert_eq!(changed, 10);
        assert_eq!(noisy[0].text, plain[0].text);
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut s = spec("unit", 2, 3, 10);
        s.text_tokens = 1;
        assert!(matches!(s.validate(), Err(SynthError::InvalidSpec(_))));
        let s = SynthSpec::new(3, (5, 5), 0, Schedule { layers: vec![] });
        assert!(s.validate().is_err());
    }
}
