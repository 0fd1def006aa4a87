//! The `mir` command line: `compute`, `profile`, `synth` and `calibrate`.
//!
//! Exit codes: 0 success, 1 malformed input or I/O failure, 2 numerical
//! failure, 64 bad flags. Only the final MIR value (4 decimals) goes to
//! stdout; diagnostics go to stderr.

mod args;
mod output;

use std::fs;
use std::path::Path;
use std::time::Instant;

use clap::Parser;
use rayon::prelude::*;

use crate::gapstats::PrepareOptions;
use crate::matsqrt::{SqrtConfig, SqrtMethod};
use crate::metric::{self, MetricError, MirOptions};
use crate::moca::{self, CalibrationError, CalibrationParams};
use crate::synth::{self, SynthError, SynthSpec};
use crate::tensor_io::{self, ManifestError, RunManifest};

pub use args::{parse_layer_selection, parse_token_counts, Cli, Command};
pub use output::{MirResultDocument, Timings};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INPUT: i32 = 1;
pub const EXIT_NUMERICAL: i32 = 2;
pub const EXIT_USAGE: i32 = 64;

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    fn input(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_INPUT,
            message: message.into(),
        }
    }

    fn usage(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }
}

impl From<ManifestError> for CliError {
    fn from(e: ManifestError) -> Self {
        CliError::input(e.to_string())
    }
}

impl From<MetricError> for CliError {
    fn from(e: MetricError) -> Self {
        let code = match e.root() {
            MetricError::Selection(_) => EXIT_USAGE,
            _ if e.is_numerical() => EXIT_NUMERICAL,
            _ => EXIT_INPUT,
        };
        CliError {
            code,
            message: e.to_string(),
        }
    }
}

impl From<SynthError> for CliError {
    fn from(e: SynthError) -> Self {
        let code = match e {
            SynthError::Sqrt(_) => EXIT_NUMERICAL,
            _ => EXIT_INPUT,
        };
        CliError {
            code,
            message: e.to_string(),
        }
    }
}

impl From<CalibrationError> for CliError {
    fn from(e: CalibrationError) -> Self {
        match e {
            CalibrationError::Metric(m) => m.into(),
            CalibrationError::Divergence { .. } => CliError {
                code: EXIT_NUMERICAL,
                message: e.to_string(),
            },
            e => CliError::input(e.to_string()),
        }
    }
}

/// Entry point used by the binary; returns the process exit code.
pub fn main() -> i32 {
    run(std::env::args_os())
}

pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {}", e.message);
            e.code
        }
    }
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Compute(a) => cmd_compute(a),
        Command::Profile(a) => cmd_profile(a),
        Command::Synth(a) => cmd_synth(a),
        Command::Calibrate(a) => cmd_calibrate(a),
    }
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| CliError::input(format!("{}: {e}", path.display())))
}

fn emit_warnings(warnings: &[String]) {
    for w in warnings {
        eprintln!("warning: {w}");
    }
}

fn profile_csv(rows: &[(usize, f64)]) -> String {
    let mut out = String::from("layer,fid\n");
    for (layer, fid) in rows {
        out.push_str(&format!("{layer},{fid}\n"));
    }
    out
}

fn load_and_compute(a: &args::MetricArgs) -> Result<(RunManifest, MirOptions, metric::GapProfile, Timings), CliError> {
    let started = Instant::now();
    let opts = a.options()?;
    let manifest = tensor_io::read_manifest(&a.manifest)?;
    let profile = metric::compute_mir(&manifest, &opts)?;
    emit_warnings(&profile.warnings);
    let timings = Timings::from_profile(&profile, started.elapsed());
    Ok((manifest, opts, profile, timings))
}

pub fn cmd_compute(a: args::ComputeArgs) -> Result<(), CliError> {
    let (_, opts, profile, timings) = load_and_compute(&a.metric)?;
    if let Some(out) = &a.out {
        let text = match a.format {
            args::OutputFormat::Json => {
                let doc = MirResultDocument::new(&profile, &opts, &a.metric.manifest, (!a.no_timings).then_some(timings));
                doc.to_json()
            }
            args::OutputFormat::Csv => profile_csv(&metric::per_layer_report(&profile)),
        };
        write_file(out, &text)?;
    }
    println!("{:.4}", profile.mir);
    Ok(())
}

pub fn cmd_profile(a: args::ProfileArgs) -> Result<(), CliError> {
    let (_, _, profile, _) = load_and_compute(&a.metric)?;
    write_file(&a.out, &profile_csv(&metric::per_layer_report(&profile)))?;
    println!("{:.4}", profile.mir);
    Ok(())
}

pub fn cmd_synth(a: args::SynthArgs) -> Result<(), CliError> {
    let (r, s) = a.tokens;
    let schedule_path = Path::new(&a.schedule);
    let schedule = if schedule_path.is_file() {
        let text = fs::read_to_string(schedule_path)
            .map_err(|e| CliError::input(format!("{}: {e}", schedule_path.display())))?;
        let schedule = synth::parse_schedule(&text)?;
        if let Some(k) = a.layers {
            if k != schedule.layers.len() {
                return Err(CliError::input(format!(
                    "--layers {k} but schedule file describes {} layers",
                    schedule.layers.len()
                )));
            }
        }
        schedule
    } else {
        let k = a
            .layers
            .ok_or_else(|| CliError::usage("--layers is required with a preset schedule"))?;
        synth::preset(&a.schedule, k, a.dim)?
    };
    let spec = SynthSpec::new(a.dim, (r, s), a.seed, schedule);
    let (_, oracle) = synth::generate_run(&spec, &a.out)?;
    eprintln!(
        "wrote {} layers to {} (oracle FID sum {:.6})",
        oracle.len(),
        a.out.display(),
        oracle.iter().sum::<f64>()
    );
    Ok(())
}

struct CalibratedLayer {
    params: CalibrationParams,
    before: f64,
    after: f64,
    warnings: Vec<String>,
}

fn gap_report_with_fallback(
    vision: &nalgebra::DMatrix<f64>,
    text: &nalgebra::DMatrix<f64>,
    params: &CalibrationParams,
    prepare: &PrepareOptions,
    opts: &MirOptions,
    warnings: &mut Vec<String>,
) -> Result<(f64, f64), CalibrationError> {
    match moca::calibration_gap_report(vision, text, params, prepare, &opts.sqrt) {
        Err(CalibrationError::Metric(e))
            if opts.fallback_to_exact && opts.sqrt.method == SqrtMethod::NewtonSchulz && e.is_numerical() =>
        {
            warnings.push(format!("{e}; fell back to exact square root"));
            let exact = SqrtConfig {
                method: SqrtMethod::Exact,
                ..opts.sqrt
            };
            moca::calibration_gap_report(vision, text, params, prepare, &exact)
        }
        other => other,
    }
}

pub fn cmd_calibrate(a: args::CalibrateArgs) -> Result<(), CliError> {
    let opts = a.metric.options()?;
    let manifest = tensor_io::read_manifest(&a.metric.manifest)?;
    let indices = metric::select_layers(&manifest, &opts)?;

    let fit_layer = |&index: &usize| -> Result<CalibratedLayer, CliError> {
        let annotate = |e: CliError| CliError {
            code: e.code,
            message: format!("layer {index}: {}", e.message),
        };
        let layer = manifest.load_layer(index).map_err(|e| annotate(e.into()))?;
        let (vision, text) = (layer.vision.to_matrix(), layer.text.to_matrix());
        let mut warnings = Vec::new();
        let params = match a.method {
            args::CalibrationMethod::Moment => moca::fit_moment_matching(&vision, &text, index),
            args::CalibrationMethod::Grad => moca::fit_gradient(&vision, &text, index, a.steps, a.lr).map(|fit| {
                warnings.push(format!(
                    "layer {index}: loss {:.6e} -> {:.6e} over {} steps",
                    fit.initial_loss(),
                    fit.best_loss(),
                    a.steps
                ));
                fit.params
            }),
        }
        .map_err(|e| annotate(e.into()))?;
        let (before, after) = gap_report_with_fallback(&vision, &text, &params, &opts.prepare, &opts, &mut warnings)
            .map_err(|e| annotate(e.into()))?;
        Ok(CalibratedLayer {
            params,
            before,
            after,
            warnings,
        })
    };

    let results: Vec<Result<CalibratedLayer, CliError>> = if opts.threads <= 1 {
        indices.iter().map(fit_layer).collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(opts.threads)
            .build()
            .map_err(|e| CliError::input(e.to_string()))?;
        pool.install(|| indices.par_iter().map(fit_layer).collect())
    };
    let layers: Vec<CalibratedLayer> = results.into_iter().collect::<Result<_, _>>()?;
    for l in &layers {
        emit_warnings(&l.warnings);
    }

    let params: Vec<CalibrationParams> = layers.iter().map(|l| l.params.clone()).collect();
    let mut text = moca::params_to_json(&params);
    text.push('\n');
    write_file(&a.out, &text)?;

    if let Some(report) = &a.report {
        let mut csv = String::from("layer,fid_before,fid_after\n");
        for l in &layers {
            csv.push_str(&format!("{},{},{}\n", l.params.layer_index, l.before, l.after));
        }
        write_file(report, &csv)?;
    }
    let mir_after = metric::aggregate(layers.iter().map(|l| l.after), opts.epsilon_floor);
    println!("{mir_after:.4}");
    Ok(())
}

/// Fallback when neither `--threads` nor `MIR_THREADS` is given.
fn default_threads() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}
