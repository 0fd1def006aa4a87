//! Everything between raw activations and the Fréchet distance: text-centric
//! scaling, the 3σ token-norm filter, and mean/covariance estimation.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor_io::LayerActivations;

#[derive(Debug, Error, PartialEq)]
pub enum StatsError {
    #[error("degenerate input: {0}")]
    DegenerateInput(&'static str),
    #[error("need at least 2 samples for a covariance, got {0}")]
    InsufficientSamples(usize),
}

/// Per-layer factor that brings the mean text-token ℓ2 norm to 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScalingFactor(f64);

impl ScalingFactor {
    pub fn alpha(self) -> f64 {
        self.0
    }
}

/// ℓ2 norm of every row.
pub fn row_norms(tokens: &DMatrix<f64>) -> Vec<f64> {
    let mut sq = vec![0.0; tokens.nrows()];
    for col in tokens.column_iter() {
        for (acc, v) in sq.iter_mut().zip(col.iter()) {
            *acc += v * v;
        }
    }
    sq.into_iter().map(f64::sqrt).collect()
}

/// `s / Σ_j ‖t_j‖₂` over the `s` text tokens.
pub fn scaling_factor(text: &DMatrix<f64>) -> Result<ScalingFactor, StatsError> {
    if text.nrows() == 0 {
        return Err(StatsError::DegenerateInput("no text tokens"));
    }
    let total: f64 = row_norms(text).iter().sum();
    if total == 0.0 {
        return Err(StatsError::DegenerateInput("all text tokens are zero vectors"));
    }
    let alpha = text.nrows() as f64 / total;
    if !alpha.is_finite() {
        return Err(StatsError::DegenerateInput("text token norms underflow"));
    }
    Ok(ScalingFactor(alpha))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutlierSide {
    /// Drop only tokens whose norm is above `m + kσ`.
    High,
    /// Keep tokens whose norm lies in `[m − kσ, m + kσ]`.
    Both,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Deviation {
    Population,
    Sample,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OutlierRule {
    pub side: OutlierSide,
    pub deviation: Deviation,
    pub k_sigma: f64,
}

impl Default for OutlierRule {
    fn default() -> Self {
        Self {
            side: OutlierSide::Both,
            deviation: Deviation::Population,
            k_sigma: 3.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Filtered {
    pub tokens: DMatrix<f64>,
    pub removed: usize,
    /// The window would have left fewer than two rows, so the input was
    /// returned unchanged.
    pub fell_back: bool,
}

/// Single-pass kσ filter on token ℓ2 norms.
pub fn remove_outliers(tokens: &DMatrix<f64>, rule: &OutlierRule) -> Filtered {
    let n = tokens.nrows();
    let unchanged = |fell_back| Filtered {
        tokens: tokens.clone(),
        removed: 0,
        fell_back,
    };
    if n < 2 {
        return unchanged(true);
    }
    let norms = row_norms(tokens);
    let mean = norms.iter().sum::<f64>() / n as f64;
    let ss: f64 = norms.iter().map(|x| (x - mean) * (x - mean)).sum();
    let denom = match rule.deviation {
        Deviation::Population => n as f64,
        Deviation::Sample => (n - 1) as f64,
    };
    let band = rule.k_sigma * (ss / denom).sqrt();
    let keep: Vec<usize> = norms
        .iter()
        .enumerate()
        .filter(|(_, &x)| {
            let dev = x - mean;
            match rule.side {
                OutlierSide::Both => dev.abs() <= band,
                OutlierSide::High => dev <= band,
            }
        })
        .map(|(i, _)| i)
        .collect();

    if keep.len() == n {
        return unchanged(false);
    }
    if keep.len() < 2 {
        return unchanged(true);
    }
    Filtered {
        tokens: tokens.select_rows(keep.iter()),
        removed: n - keep.len(),
        fell_back: false,
    }
}

/// Mean, unbiased covariance and sample count of one modality at one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalityMoments {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
    pub sample_count: usize,
}

impl ModalityMoments {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Moments of a known Gaussian, for feeding exact parameters into the
    /// distance computation.
    pub fn from_parameters(mean: DVector<f64>, covariance: DMatrix<f64>) -> Self {
        Self {
            mean,
            covariance,
            sample_count: usize::MAX,
        }
    }
}

/// Two-pass estimate: column means first, then `XcᵀXc / (n − 1)` on the
/// centered matrix.
pub fn moments(tokens: &DMatrix<f64>) -> Result<ModalityMoments, StatsError> {
    let n = tokens.nrows();
    if n < 2 {
        return Err(StatsError::InsufficientSamples(n));
    }
    let mean = DVector::from_iterator(
        tokens.ncols(),
        tokens.column_iter().map(|c| c.sum() / n as f64),
    );
    let mut centered = tokens.clone();
    for (mut col, mu) in centered.column_iter_mut().zip(mean.iter()) {
        col.add_scalar_mut(-mu);
    }
    let mut cov = centered.tr_mul(&centered);
    cov /= (n - 1) as f64;
    // tr_mul computes (i, j) and (j, i) separately; make them agree exactly.
    let cov = (&cov + cov.transpose()) * 0.5;
    Ok(ModalityMoments {
        mean,
        covariance: cov,
        sample_count: n,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrepareOptions {
    /// Apply the text-centric scaling factor to both modalities.
    pub normalize: bool,
    /// `None` skips outlier removal.
    pub outliers: Option<OutlierRule>,
}

impl Default for PrepareOptions {
    fn default() -> Self {
        Self {
            normalize: true,
            outliers: Some(OutlierRule::default()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct PreparedLayer {
    pub vision: ModalityMoments,
    pub text: ModalityMoments,
    pub alpha: Option<f64>,
    pub vision_removed: usize,
    pub text_removed: usize,
    pub warnings: Vec<String>,
}

/// Scales, filters and summarizes one layer.
pub fn prepare_layer(layer: &LayerActivations, opts: &PrepareOptions) -> Result<PreparedLayer, StatsError> {
    prepare_matrices(layer.vision.to_matrix(), layer.text.to_matrix(), opts)
}

/// [`prepare_layer`] on matrices already widened to `f64`.
pub fn prepare_matrices(
    mut vision: DMatrix<f64>,
    mut text: DMatrix<f64>,
    opts: &PrepareOptions,
) -> Result<PreparedLayer, StatsError> {
    let alpha = if opts.normalize {
        let alpha = scaling_factor(&text)?.alpha();
        vision *= alpha;
        text *= alpha;
        Some(alpha)
    } else {
        None
    };

    let mut warnings = Vec::new();
    let mut filter = |m: DMatrix<f64>, modality: &str| -> (DMatrix<f64>, usize) {
        match &opts.outliers {
            None => (m, 0),
            Some(rule) => {
                let f = remove_outliers(&m, rule);
                if f.fell_back {
                    warnings.push(format!(
                        "{modality}: outlier window would leave fewer than 2 of {} tokens; kept all",
                        m.nrows()
                    ));
                }
                (f.tokens, f.removed)
            }
        }
    };
    let (vision, vision_removed) = filter(vision, "vision");
    let (text, text_removed) = filter(text, "text");

    Ok(PreparedLayer {
        vision: moments(&vision)?,
        text: moments(&text)?,
        alpha,
        vision_removed,
        text_removed,
        warnings,
    })
}
