//! Per-layer Fréchet distance between vision and text tokens and the
//! Modality Integration Rate, `ln Σ_k FID_k`.

use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gapstats::{self, ModalityMoments, OutlierRule, PrepareOptions, StatsError};
use crate::matsqrt::{self, SqrtConfig, SqrtError, SqrtMethod};
use crate::tensor_io::{LayerActivations, ManifestError, RunManifest};

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("moment dimensions differ: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error(transparent)]
    Sqrt(#[from] SqrtError),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error("distance came out at {value:e}, below the roundoff allowance {allowance:e}; the square root is inconsistent")]
    NegativeDistance { value: f64, allowance: f64 },
    #[error("invalid layer selection: {0}")]
    Selection(String),
    #[error("layer {index}: {source}")]
    Layer {
        index: usize,
        #[source]
        source: Box<MetricError>,
    },
    #[error("could not start worker pool: {0}")]
    ThreadPool(String),
}

impl MetricError {
    fn at_layer(self, index: usize) -> Self {
        match self {
            e @ MetricError::Layer { .. } => e,
            e => MetricError::Layer {
                index,
                source: Box::new(e),
            },
        }
    }

    /// Innermost error, without layer annotations.
    pub fn root(&self) -> &MetricError {
        match self {
            MetricError::Layer { source, .. } => source.root(),
            e => e,
        }
    }

    /// Whether the failure is numerical rather than bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self.root(),
            MetricError::Sqrt(
                SqrtError::NonConvergence { .. } | SqrtError::EigenFailure | SqrtError::NotPositiveSemidefinite { .. }
            ) | MetricError::NegativeDistance { .. }
        )
    }

    pub fn layer_index(&self) -> Option<usize> {
        match self {
            MetricError::Layer { index, .. } => Some(*index),
            _ => None,
        }
    }
}

/// `‖μv − μt‖² + Tr(Σv) + Tr(Σt) − 2·Tr((ΣvΣt)^½)`.
///
/// Negative results within `1e-8·max(1, Tr Σv + Tr Σt)` are roundoff and
/// clamp to zero; anything lower is reported as an error.
pub fn fid_layer(mv: &ModalityMoments, mt: &ModalityMoments, cfg: &SqrtConfig) -> Result<f64, MetricError> {
    if mv.dim() != mt.dim() {
        return Err(MetricError::DimensionMismatch(mv.dim(), mt.dim()));
    }
    let mean_term = (&mv.mean - &mt.mean).norm_squared();
    let traces = mv.covariance.trace() + mt.covariance.trace();
    let cross = matsqrt::trace_sqrt_product(&mv.covariance, &mt.covariance, cfg)?;
    let fid = mean_term + traces - 2.0 * cross;
    if fid >= 0.0 {
        return Ok(fid);
    }
    let allowance = 1e-8 * traces.max(1.0);
    if fid >= -allowance {
        Ok(0.0)
    } else {
        Err(MetricError::NegativeDistance { value: fid, allowance })
    }
}

/// `ln(max(Σ fids, floor))`, summed in the given order.
pub fn aggregate(fids: impl IntoIterator<Item = f64>, epsilon_floor: f64) -> f64 {
    let sum: f64 = fids.into_iter().sum();
    sum.max(epsilon_floor).ln()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MirOptions {
    pub prepare: PrepareOptions,
    pub sqrt: SqrtConfig,
    /// Retry a layer with the exact square root when Newton–Schulz fails.
    pub fallback_to_exact: bool,
    pub epsilon_floor: f64,
    /// Explicit layer indices; `None` means all transformer-block layers
    /// (plus layer 0 when `include_embedding` is set).
    pub layers: Option<Vec<usize>>,
    pub include_embedding: bool,
    /// Layer-level parallelism; 1 processes layers serially.
    pub threads: usize,
}

impl Default for MirOptions {
    fn default() -> Self {
        Self {
            prepare: PrepareOptions::default(),
            sqrt: SqrtConfig::default(),
            fallback_to_exact: true,
            epsilon_floor: 1e-12,
            layers: None,
            include_embedding: false,
            threads: 1,
        }
    }
}

/// Options that determine the value of a profile, echoed into results so
/// only like-for-like numbers get compared.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigFingerprint {
    pub normalize: bool,
    pub outlier_removal: Option<OutlierRule>,
    pub sqrt: SqrtConfig,
    pub fallback_to_exact: bool,
    pub epsilon_floor: f64,
}

impl From<&MirOptions> for ConfigFingerprint {
    fn from(o: &MirOptions) -> Self {
        Self {
            normalize: o.prepare.normalize,
            outlier_removal: o.prepare.outliers,
            sqrt: o.sqrt,
            fallback_to_exact: o.fallback_to_exact,
            epsilon_floor: o.epsilon_floor,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerGap {
    pub index: usize,
    pub fid: f64,
    pub alpha: Option<f64>,
    pub vision_tokens: usize,
    pub text_tokens: usize,
    pub vision_removed: usize,
    pub text_removed: usize,
    pub sqrt_method: SqrtMethod,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StageTimings {
    pub load: Duration,
    pub prepare: Duration,
    pub distance: Duration,
}

impl std::ops::AddAssign for StageTimings {
    fn add_assign(&mut self, rhs: Self) {
        self.load += rhs.load;
        self.prepare += rhs.prepare;
        self.distance += rhs.distance;
    }
}

/// Per-layer distances and their log-sum.
#[derive(Debug, Clone)]
pub struct GapProfile {
    pub layers: Vec<LayerGap>,
    pub mir: f64,
    pub config: ConfigFingerprint,
    pub warnings: Vec<String>,
    /// Summed over layers; with several threads this exceeds wall time.
    pub timings: StageTimings,
}

impl GapProfile {
    pub fn per_layer_fid(&self) -> Vec<f64> {
        self.layers.iter().map(|l| l.fid).collect()
    }
}

/// `(layer index, FID)` rows in layer order.
pub fn per_layer_report(profile: &GapProfile) -> Vec<(usize, f64)> {
    profile.layers.iter().map(|l| (l.index, l.fid)).collect()
}

struct LayerOutcome {
    gap: LayerGap,
    warnings: Vec<String>,
    timings: StageTimings,
}

fn distance_with_fallback(
    mv: &ModalityMoments,
    mt: &ModalityMoments,
    opts: &MirOptions,
    warnings: &mut Vec<String>,
) -> Result<(f64, SqrtMethod), MetricError> {
    match fid_layer(mv, mt, &opts.sqrt) {
        Ok(fid) => Ok((fid, opts.sqrt.method)),
        Err(e) if opts.fallback_to_exact && opts.sqrt.method == SqrtMethod::NewtonSchulz && e.is_numerical() => {
            warnings.push(format!("{e}; fell back to exact square root"));
            let exact = SqrtConfig {
                method: SqrtMethod::Exact,
                ..opts.sqrt
            };
            Ok((fid_layer(mv, mt, &exact)?, SqrtMethod::Exact))
        }
        Err(e) => Err(e),
    }
}

fn evaluate_layer(layer: &LayerActivations, opts: &MirOptions) -> Result<LayerOutcome, MetricError> {
    let started = Instant::now();
    let prepared = gapstats::prepare_layer(layer, &opts.prepare)?;
    let prepare = started.elapsed();

    let mut warnings = prepared.warnings.clone();
    let started = Instant::now();
    let (fid, sqrt_method) = distance_with_fallback(&prepared.vision, &prepared.text, opts, &mut warnings)?;
    let distance = started.elapsed();

    Ok(LayerOutcome {
        gap: LayerGap {
            index: layer.layer_index,
            fid,
            alpha: prepared.alpha,
            vision_tokens: prepared.vision.sample_count,
            text_tokens: prepared.text.sample_count,
            vision_removed: prepared.vision_removed,
            text_removed: prepared.text_removed,
            sqrt_method,
        },
        warnings: warnings
            .into_iter()
            .map(|w| format!("layer {}: {w}", layer.layer_index))
            .collect(),
        timings: StageTimings {
            prepare,
            distance,
            ..Default::default()
        },
    })
}

fn run_pool<T, F>(threads: usize, tasks: &[T], f: F) -> Result<Vec<Result<LayerOutcome, MetricError>>, MetricError>
where
    T: Sync,
    F: Fn(&T) -> Result<LayerOutcome, MetricError> + Sync + Send,
{
    if threads <= 1 {
        return Ok(tasks.iter().map(f).collect());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| MetricError::ThreadPool(e.to_string()))?;
    Ok(pool.install(|| tasks.par_iter().map(f).collect()))
}

fn assemble(outcomes: Vec<Result<LayerOutcome, MetricError>>, opts: &MirOptions) -> Result<GapProfile, MetricError> {
    let mut layers = Vec::with_capacity(outcomes.len());
    let mut warnings = Vec::new();
    let mut timings = StageTimings::default();
    for outcome in outcomes {
        let outcome = outcome?;
        warnings.extend(outcome.warnings);
        timings += outcome.timings;
        layers.push(outcome.gap);
    }
    let mir = aggregate(layers.iter().map(|l| l.fid), opts.epsilon_floor);
    Ok(GapProfile {
        layers,
        mir,
        config: opts.into(),
        warnings,
        timings,
    })
}

/// MIR over in-memory layers. `opts.layers`, when set, filters by
/// `layer_index`.
pub fn compute_mir_layers(layers: &[LayerActivations], opts: &MirOptions) -> Result<GapProfile, MetricError> {
    opts.sqrt.validate()?;
    let selected: Vec<&LayerActivations> = match &opts.layers {
        None => layers.iter().collect(),
        Some(wanted) => {
            let mut out = Vec::with_capacity(wanted.len());
            for &index in wanted {
                let layer = layers
                    .iter()
                    .find(|l| l.layer_index == index)
                    .ok_or_else(|| MetricError::Selection(format!("no layer {index}")))?;
                out.push(layer);
            }
            out
        }
    };
    let outcomes = run_pool(opts.threads, &selected, |layer| {
        evaluate_layer(layer, opts).map_err(|e| e.at_layer(layer.layer_index))
    })?;
    assemble(outcomes, opts)
}

/// Layer indices `compute_mir` will visit for this manifest.
pub fn select_layers(manifest: &RunManifest, opts: &MirOptions) -> Result<Vec<usize>, MetricError> {
    match &opts.layers {
        Some(wanted) => {
            for &index in wanted {
                let ok = match index {
                    0 => manifest.embedding.is_some(),
                    k => k <= manifest.num_layers,
                };
                if !ok {
                    return Err(MetricError::Selection(format!(
                        "layer {index} is not in the manifest (layers 1..={}{})",
                        manifest.num_layers,
                        if manifest.embedding.is_some() { " plus embedding layer 0" } else { "" }
                    )));
                }
            }
            Ok(wanted.clone())
        }
        None => {
            if opts.include_embedding && manifest.embedding.is_none() {
                return Err(MetricError::Selection(
                    "embedding layer requested but the manifest has no embedding entry".into(),
                ));
            }
            let first = if opts.include_embedding { 0 } else { 1 };
            Ok((first..=manifest.num_layers).collect())
        }
    }
}

/// Loads each selected layer from disk, prepares it and sums the distances
/// in layer order.
pub fn compute_mir(manifest: &RunManifest, opts: &MirOptions) -> Result<GapProfile, MetricError> {
    opts.sqrt.validate()?;
    let indices = select_layers(manifest, opts)?;
    let outcomes = run_pool(opts.threads, &indices, |&index| {
        let started = Instant::now();
        let layer = manifest.load_layer(index).map_err(|e| MetricError::from(e).at_layer(index))?;
        let load = started.elapsed();
        let mut outcome = evaluate_layer(&layer, opts).map_err(|e| e.at_layer(index))?;
        outcome.timings.load = load;
        Ok(outcome)
    })?;
    assemble(outcomes, opts)
}
