//! Per-layer Gaussian descriptions for synthetic runs, their JSON form, and
//! the named presets.

use serde::{Deserialize, Serialize};

use super::SynthError;

/// Mean of one modality: a norm spread evenly over all dimensions
/// (`c/√d` each), or an explicit vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MeanSpec {
    Norm(f64),
    Vector(Vec<f64>),
}

impl Default for MeanSpec {
    fn default() -> Self {
        MeanSpec::Norm(0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovSpec {
    Identity,
    Diagonal(Vec<f64>),
    /// Haar-random eigenbasis, eigenvalues log-spaced over `[1/condition, 1]`
    /// then rescaled to average `trace_per_dim`.
    RandomSpd {
        condition: f64,
        #[serde(default = "one")]
        trace_per_dim: f64,
    },
    /// `R·diag(values)·Rᵀ` with a random rotation `R`.
    RotatedDiagonal(Vec<f64>),
    Full(Vec<Vec<f64>>),
}

impl Default for CovSpec {
    fn default() -> Self {
        CovSpec::Identity
    }
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GaussianSpec {
    #[serde(default)]
    pub mean: MeanSpec,
    #[serde(default)]
    pub cov: CovSpec,
}

/// A fraction of vision tokens multiplied by `factor` after sampling.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OutlierInjection {
    pub fraction: f64,
    pub factor: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    #[serde(default)]
    pub vision: GaussianSpec,
    #[serde(default)]
    pub text: GaussianSpec,
    /// Multiplies every sampled token of both modalities.
    #[serde(default = "one")]
    pub scale: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vision_outliers: Option<OutlierInjection>,
}

impl Default for LayerSpec {
    fn default() -> Self {
        Self {
            vision: GaussianSpec::default(),
            text: GaussianSpec::default(),
            scale: 1.0,
            vision_outliers: None,
        }
    }
}

impl LayerSpec {
    pub fn validate(&self, dim: usize) -> Result<(), SynthError> {
        let bad = |msg: String| Err(SynthError::InvalidSpec(msg));
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return bad(format!("scale must be positive, got {}", self.scale));
        }
        if let Some(o) = self.vision_outliers {
            if !(0.0..=1.0).contains(&o.fraction) || !o.factor.is_finite() {
                return bad(format!("invalid outlier injection {o:?}"));
            }
        }
        for (name, g) in [("vision", &self.vision), ("text", &self.text)] {
            match &g.mean {
                MeanSpec::Norm(c) if !c.is_finite() => return bad(format!("{name} mean norm is not finite")),
                MeanSpec::Vector(v) if v.len() != dim => {
                    return bad(format!("{name} mean has length {}, expected {dim}", v.len()))
                }
                MeanSpec::Vector(v) if v.iter().any(|x| !x.is_finite()) => {
                    return bad(format!("{name} mean is not finite"))
                }
                _ => {}
            }
            match &g.cov {
                CovSpec::Identity => {}
                CovSpec::Diagonal(v) | CovSpec::RotatedDiagonal(v) => {
                    if v.len() != dim {
                        return bad(format!("{name} covariance diagonal has length {}, expected {dim}", v.len()));
                    }
                    if v.iter().any(|x| !(*x > 0.0 && x.is_finite())) {
                        return bad(format!("{name} covariance diagonal must be positive"));
                    }
                }
                CovSpec::RandomSpd { condition, trace_per_dim } => {
                    if !(*condition >= 1.0 && condition.is_finite()) {
                        return bad(format!("{name} condition number must be >= 1"));
                    }
                    if !(*trace_per_dim > 0.0 && trace_per_dim.is_finite()) {
                        return bad(format!("{name} trace_per_dim must be positive"));
                    }
                }
                CovSpec::Full(rows) => {
                    if rows.len() != dim || rows.iter().any(|r| r.len() != dim) {
                        return bad(format!("{name} full covariance must be {dim}x{dim}"));
                    }
                    if rows.iter().flatten().any(|x| !x.is_finite()) {
                        return bad(format!("{name} full covariance is not finite"));
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub layers: Vec<LayerSpec>,
}

/// Parses a schedule file: `{"layers": [...]}` or a bare array of layers.
pub fn parse_schedule(text: &str) -> Result<Schedule, SynthError> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Form {
        Wrapped(Schedule),
        Bare(Vec<LayerSpec>),
    }
    match serde_json::from_str::<Form>(text) {
        Ok(Form::Wrapped(s)) => Ok(s),
        Ok(Form::Bare(layers)) => Ok(Schedule { layers }),
        Err(e) => Err(SynthError::InvalidSpec(format!("bad schedule JSON: {e}"))),
    }
}

pub const PRESETS: &[&str] = &[
    "zero-gap",
    "unit",
    "decreasing",
    "random-spd",
    "diag-affine",
    "rotated",
    "magnitude-growth",
    "outliers",
];

fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
}

/// Mean-offset norms falling geometrically from 2 to 0.5 over the layers.
pub fn decreasing_offsets(num_layers: usize) -> Vec<f64> {
    if num_layers == 1 {
        return vec![2.0];
    }
    (0..num_layers)
        .map(|k| 2.0 * 4f64.powf(-(k as f64) / (num_layers - 1) as f64))
        .collect()
}

/// Builds a named schedule for `num_layers` layers of width `dim`.
pub fn preset(name: &str, num_layers: usize, dim: usize) -> Result<Schedule, SynthError> {
    let offset = |norm: f64| LayerSpec {
        vision: GaussianSpec {
            mean: MeanSpec::Norm(norm),
            cov: CovSpec::Identity,
        },
        ..Default::default()
    };
    let layers = match name {
        "zero-gap" => vec![LayerSpec::default(); num_layers],
        "unit" => vec![offset(1.0); num_layers],
        "decreasing" => decreasing_offsets(num_layers).into_iter().map(offset).collect(),
        "random-spd" => vec![
            LayerSpec {
                vision: GaussianSpec {
                    mean: MeanSpec::Norm(1.0),
                    cov: CovSpec::RandomSpd { condition: 1e4, trace_per_dim: 1.0 },
                },
                text: GaussianSpec {
                    mean: MeanSpec::Norm(0.0),
                    cov: CovSpec::RandomSpd { condition: 1e4, trace_per_dim: 1.0 },
                },
                ..Default::default()
            };
            num_layers
        ],
        "diag-affine" => {
            let text_var = linspace(0.5, 2.0, dim);
            let gains = linspace(2.0, 0.5, dim);
            let vision_var = text_var.iter().zip(&gains).map(|(s, a)| a * a * s).collect();
            vec![
                LayerSpec {
                    vision: GaussianSpec {
                        mean: MeanSpec::Norm(3.0),
                        cov: CovSpec::Diagonal(vision_var),
                    },
                    text: GaussianSpec {
                        mean: MeanSpec::Norm(0.0),
                        cov: CovSpec::Diagonal(text_var),
                    },
                    ..Default::default()
                };
                num_layers
            ]
        }
        "rotated" => {
            let text_var = linspace(0.25, 4.0, dim);
            let vision_var = text_var.iter().map(|s| 2.0 * s).collect();
            vec![
                LayerSpec {
                    vision: GaussianSpec {
                        mean: MeanSpec::Norm(1.0),
                        cov: CovSpec::RotatedDiagonal(vision_var),
                    },
                    text: GaussianSpec {
                        mean: MeanSpec::Norm(0.0),
                        cov: CovSpec::Diagonal(text_var),
                    },
                    ..Default::default()
                };
                num_layers
            ]
        }
        "magnitude-growth" => (0..num_layers)
            .map(|k| LayerSpec {
                scale: 10f64.powi(k as i32),
                ..offset(2.0)
            })
            .collect(),
        "outliers" => vec![
            LayerSpec {
                vision_outliers: Some(OutlierInjection { fraction: 0.01, factor: 10.0 }),
                ..offset(1.0)
            };
            num_layers
        ],
        other => {
            return Err(SynthError::InvalidSpec(format!(
                "unknown preset {other:?}; known presets: {}",
                PRESETS.join(", ")
            )))
        }
    };
    Ok(Schedule { layers })
}
