use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use super::{default_threads, CliError};
use crate::gapstats::{Deviation, OutlierRule, OutlierSide, PrepareOptions};
use crate::matsqrt::{SqrtConfig, SqrtMethod};
use crate::metric::MirOptions;

#[derive(Debug, Parser)]
#[command(name = "mir", version, about = "Modality Integration Rate for vision-language model activations")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Compute MIR for a run manifest.
    Compute(ComputeArgs),
    /// Write the per-layer FID profile as CSV.
    Profile(ProfileArgs),
    /// Generate a synthetic run with analytic ground truth.
    Synth(SynthArgs),
    /// Fit per-layer scale-and-shift calibration for vision tokens.
    Calibrate(CalibrateArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SqrtArg {
    Exact,
    NewtonSchulz,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SideArg {
    High,
    Both,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DeviationArg {
    Population,
    Sample,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OutputFormat {
    Json,
    Csv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum CalibrationMethod {
    Moment,
    Grad,
}

/// Options shared by every command that evaluates layer distances.
#[derive(Debug, Args)]
pub struct MetricArgs {
    /// Run manifest (JSON).
    #[arg(long)]
    pub manifest: PathBuf,
    /// Matrix square-root method for the trace term.
    #[arg(long, value_enum, default_value = "newton-schulz")]
    pub sqrt: SqrtArg,
    /// Newton-Schulz iteration cap (1..=1000).
    #[arg(long, default_value_t = 50)]
    pub ns_iters: u32,
    /// Newton-Schulz relative-step tolerance.
    #[arg(long, default_value_t = 1e-7)]
    pub ns_tol: f64,
    /// Ridge λ added as λ·(tr/d)·I to each covariance.
    #[arg(long, default_value_t = 1e-10)]
    pub jitter: f64,
    /// Fail instead of retrying with the exact square root when Newton-Schulz fails.
    #[arg(long)]
    pub no_fallback: bool,
    /// Floor applied to the FID sum before the logarithm.
    #[arg(long, default_value_t = 1e-12)]
    pub epsilon: f64,
    /// Skip text-centric scaling (ablation).
    #[arg(long)]
    pub no_normalize: bool,
    /// Skip 3σ outlier removal (ablation).
    #[arg(long)]
    pub no_outlier_removal: bool,
    #[arg(long, value_enum, default_value = "both")]
    pub outlier_side: SideArg,
    /// Standard deviation used by the outlier window.
    #[arg(long, value_enum, default_value = "population")]
    pub outlier_std: DeviationArg,
    /// Layer subset: `a..b` (inclusive), a single index, or a comma list of those.
    #[arg(long, value_parser = parse_layer_list)]
    pub layers: Option<LayerList>,
    /// Also evaluate the embedding output (layer 0) when the manifest has it.
    #[arg(long)]
    pub include_embedding: bool,
    /// Maximum layers processed concurrently.
    #[arg(long, env = "MIR_THREADS")]
    pub threads: Option<usize>,
}

impl MetricArgs {
    pub fn options(&self) -> Result<MirOptions, CliError> {
        let sqrt = SqrtConfig {
            method: match self.sqrt {
                SqrtArg::Exact => SqrtMethod::Exact,
                SqrtArg::NewtonSchulz => SqrtMethod::NewtonSchulz,
            },
            iterations: self.ns_iters,
            jitter: self.jitter,
            tolerance: self.ns_tol,
        };
        sqrt.validate().map_err(|e| CliError::usage(e.to_string()))?;
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(CliError::usage("--epsilon must be positive"));
        }
        let threads = self.threads.unwrap_or_else(default_threads);
        if threads == 0 {
            return Err(CliError::usage("--threads must be at least 1"));
        }
        let outliers = (!self.no_outlier_removal).then(|| OutlierRule {
            side: match self.outlier_side {
                SideArg::High => OutlierSide::High,
                SideArg::Both => OutlierSide::Both,
            },
            deviation: match self.outlier_std {
                DeviationArg::Population => Deviation::Population,
                DeviationArg::Sample => Deviation::Sample,
            },
            ..OutlierRule::default()
        });
        Ok(MirOptions {
            prepare: PrepareOptions {
                normalize: !self.no_normalize,
                outliers,
            },
            sqrt,
            fallback_to_exact: !self.no_fallback,
            epsilon_floor: self.epsilon,
            layers: self.layers.as_ref().map(|l| l.0.clone()),
            include_embedding: self.include_embedding,
            threads,
        })
    }
}

#[derive(Debug, Args)]
pub struct ComputeArgs {
    #[command(flatten)]
    pub metric: MetricArgs,
    /// Where to write the result document.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "json")]
    pub format: OutputFormat,
    /// Leave wall-clock timings out of the JSON document.
    #[arg(long)]
    pub no_timings: bool,
}

#[derive(Debug, Args)]
pub struct ProfileArgs {
    #[command(flatten)]
    pub metric: MetricArgs,
    /// CSV destination (`layer,fid`).
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Number of layers (required for presets).
    #[arg(long)]
    pub layers: Option<usize>,
    /// Hidden dimension.
    #[arg(long)]
    pub dim: usize,
    /// Tokens per modality: `r,s` or a single count for both.
    #[arg(long, value_parser = parse_token_counts)]
    pub tokens: (usize, usize),
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Schedule JSON file, or a preset name (zero-gap, unit, decreasing,
    /// random-spd, diag-affine, rotated, magnitude-growth, outliers).
    #[arg(long)]
    pub schedule: String,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    #[command(flatten)]
    pub metric: MetricArgs,
    #[arg(long, value_enum)]
    pub method: CalibrationMethod,
    /// Gradient steps (grad method).
    #[arg(long, default_value_t = 500)]
    pub steps: usize,
    /// Learning rate (grad method).
    #[arg(long, default_value_t = 0.05)]
    pub lr: f64,
    /// Calibration parameters output (JSON array, one record per layer).
    #[arg(long)]
    pub out: PathBuf,
    /// Optional CSV `layer,fid_before,fid_after`.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

/// Parsed `--layers` value. A newtype so clap treats it as one value.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerList(pub Vec<usize>);

fn parse_layer_list(s: &str) -> Result<LayerList, String> {
    parse_layer_selection(s).map(LayerList)
}

fn parse_index(s: &str) -> Result<usize, String> {
    s.trim()
        .parse()
        .map_err(|_| format!("{s:?} is not a layer index"))
}

/// Parses `a..b` / `a..=b` (both inclusive), `a`, or comma-separated
/// combinations into an ordered list of layer indices.
pub fn parse_layer_selection(s: &str) -> Result<Vec<usize>, String> {
    let mut out = Vec::new();
    for part in s.split(',') {
        let part = part.trim();
        if part.is_empty() {
            return Err(format!("empty item in layer selection {s:?}"));
        }
        match part.split_once("..") {
            Some((lo, hi)) => {
                let hi = hi.strip_prefix('=').unwrap_or(hi);
                let (lo, hi) = (parse_index(lo)?, parse_index(hi)?);
                if lo > hi {
                    return Err(format!("empty layer range {part:?}"));
                }
                if hi - lo > 1_000_000 {
                    return Err(format!("layer range {part:?} is implausibly large"));
                }
                out.extend(lo..=hi);
            }
            None => out.push(parse_index(part)?),
        }
    }
    let mut seen = std::collections::HashSet::new();
    if let Some(dup) = out.iter().find(|i| !seen.insert(**i)) {
        return Err(format!("layer {dup} selected twice"));
    }
    Ok(out)
}

/// `r,s` or a single `n` used for both modalities.
pub fn parse_token_counts(s: &str) -> Result<(usize, usize), String> {
    let parse = |t: &str| -> Result<usize, String> {
        let n: usize = t.trim().parse().map_err(|_| format!("{t:?} is not a token count"))?;
        if n < 2 {
            return Err("token counts must be at least 2".into());
        }
        Ok(n)
    };
    match s.split_once(',') {
        Some((r, t)) => Ok((parse(r)?, parse(t)?)),
        None => {
            let n = parse(s)?;
            Ok((n, n))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layer_ranges() {
        assert_eq!(parse_layer_selection("2..3").unwrap(), vec![2, 3]);
        assert_eq!(parse_layer_selection("2..=4").unwrap(), vec![2, 3, 4]);
        assert_eq!(parse_layer_selection("5").unwrap(), vec![5]);
        assert_eq!(parse_layer_selection("1,4..5").unwrap(), vec![1, 4, 5]);
        for bad in ["", "3..1", "a..b", "1,,2", "1,1", "0..99999999999"] {
            assert!(parse_layer_selection(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn token_counts() {
        assert_eq!(parse_token_counts("100,200").unwrap(), (100, 200));
        assert_eq!(parse_token_counts("50").unwrap(), (50, 50));
        assert!(parse_token_counts("1,5").is_err());
        assert!(parse_token_counts("x").is_err());
    }

    #[test]
    fn defaults_match_documented_options() {
        let cli = Cli::try_parse_from(["mir", "compute", "--manifest", "m.json", "--threads", "1"]).unwrap();
        let Command::Compute(a) = cli.command else { panic!() };
        let opts = a.metric.options().unwrap();
        assert_eq!(opts.sqrt, SqrtConfig::default());
        assert_eq!(opts.prepare, PrepareOptions::default());
        assert_eq!(opts.epsilon_floor, 1e-12);
        assert!(opts.fallback_to_exact);
        assert_eq!(opts.threads, 1);
        assert_eq!(opts.layers, None);

        let cli = Cli::try_parse_from(["mir", "profile", "--manifest", "m", "--out", "o", "--layers", "2..3"]).unwrap();
        let Command::Profile(a) = cli.command else { panic!() };
        assert_eq!(a.metric.options().unwrap().layers, Some(vec![2, 3]));
    }

    #[test]
    fn bad_ns_iterations_rejected() {
        let cli = Cli::try_parse_from(["mir", "compute", "--manifest", "m.json", "--ns-iters", "0"]).unwrap();
        let Command::Compute(a) = cli.command else { panic!() };
        assert_eq!(a.metric.options().unwrap_err().code, super::super::EXIT_USAGE);
    }
}
