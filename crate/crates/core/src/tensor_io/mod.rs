//! Activation tensors on disk: the NPY codec and the run manifest that binds
//! per-layer vision/text files together.

mod manifest;
pub mod npy;

use nalgebra::DMatrix;
use thiserror::Error;

pub use manifest::{read_manifest, write_manifest, EmbeddingEntry, LayerEntry, ManifestError, RunManifest};
pub use npy::{read_tensor, read_tensor_header, write_tensor, NpyHeader, TensorError};

#[derive(Debug, Error)]
#[error("data length {len} does not match shape ({rows}, {cols})")]
pub struct ShapeError {
    rows: usize,
    cols: usize,
    len: usize,
}

/// Row-major `rows × cols` matrix of 32-bit floats, one token per row.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor2 {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Tensor2 {
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self, ShapeError> {
        if rows.checked_mul(cols) != Some(data.len()) {
            return Err(ShapeError {
                rows,
                cols,
                len: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self, ShapeError> {
        let cols = rows.first().map_or(0, Vec::len);
        let data: Vec<f32> = rows.iter().flatten().copied().collect();
        Self::from_vec(rows.len(), cols, data)
    }

    /// Rounds an `f64` token matrix to single precision.
    pub fn from_matrix(m: &DMatrix<f64>) -> Self {
        let mut data = Vec::with_capacity(m.len());
        for row in m.row_iter() {
            data.extend(row.iter().map(|&v| v as f32));
        }
        Self {
            rows: m.nrows(),
            cols: m.ncols(),
            data,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn first_non_finite(&self) -> Option<(usize, usize)> {
        let idx = self.data.iter().position(|v| !v.is_finite())?;
        Some((idx / self.cols.max(1), idx % self.cols.max(1)))
    }

    /// Multiplies every entry by `c`, rounding to `f32`.
    pub fn scaled(&self, c: f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| (v as f64 * c) as f32).collect(),
        }
    }

    /// Widens to an `f64` matrix (tokens × hidden-dim) for the statistics.
    pub fn to_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_iterator(self.rows, self.cols, self.data.iter().map(|&v| v as f64))
    }
}

/// One layer's vision-token and text-token matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerActivations {
    pub layer_index: usize,
    pub vision: Tensor2,
    pub text: Tensor2,
}

#[derive(Debug, Error)]
pub enum ActivationError {
    #[error("vision has {vision} columns but text has {text}")]
    ColumnMismatch { vision: usize, text: usize },
    #[error("{modality} tokens contain a non-finite value at row {row}, column {col}")]
    NonFinite {
        modality: &'static str,
        row: usize,
        col: usize,
    },
}

impl LayerActivations {
    pub fn new(layer_index: usize, vision: Tensor2, text: Tensor2) -> Result<Self, ActivationError> {
        if vision.cols() != text.cols() {
            return Err(ActivationError::ColumnMismatch {
                vision: vision.cols(),
                text: text.cols(),
            });
        }
        for (modality, t) in [("vision", &vision), ("text", &text)] {
            if let Some((row, col)) = t.first_non_finite() {
                return Err(ActivationError::NonFinite { modality, row, col });
            }
        }
        Ok(Self {
            layer_index,
            vision,
            text,
        })
    }

    pub fn hidden_dim(&self) -> usize {
        self.text.cols()
    }

    /// Both modalities multiplied by the same constant.
    pub fn jointly_scaled(&self, c: f64) -> Self {
        Self {
            layer_index: self.layer_index,
            vision: self.vision.scaled(c),
            text: self.text.scaled(c),
        }
    }
}
