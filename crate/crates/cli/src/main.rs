//! `sphseg` command-line interface.
//!
//! Exit codes: 0 success, 2 invalid input or usage, 3 runtime failure.
//! Failures print one JSON line on stderr:
//! `{"error":"validation"|"runtime","message":"..."}`.

mod commands;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sphseg::config::Overrides;

/// Thread-count override for the worker pool.
pub const THREADS_ENV: &str = "SPHSEG_THREADS";

#[derive(Parser, Debug)]
#[command(name = "sphseg", version, about = "Acoustic source localization as polar-disk segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every subcommand; each overrides the config file.
#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// Pipeline config JSON (missing fields take built-in defaults).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Steering grid step in degrees: `4` or `AZxEL` such as `4x4`.
    #[arg(long, value_parser = parse_grid)]
    pub grid: Option<(f64, f64)>,
    /// Feature band in Hz as `lo,hi`.
    #[arg(long, value_parser = parse_band)]
    pub band: Option<(f64, f64)>,
    #[arg(long)]
    pub nbands: Option<usize>,
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
}

impl Common {
    pub fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            grid: self.grid,
            band: self.band,
            n_bands: self.nbands,
            threshold: self.threshold,
            alpha: self.alpha,
            beta: self.beta,
            learning_rate: self.lr,
            epochs: self.epochs,
        }
    }
}

fn parse_grid(s: &str) -> Result<(f64, f64), String> {
    let num = |v: &str| v.trim().parse::<f64>().map_err(|_| format!("bad grid step {v:?}"));
    match s.split_once(['x', 'X']) {
        Some((a, e)) => Ok((num(a)?, num(e)?)),
        None => num(s).map(|v| (v, v)),
    }
}

fn parse_band(s: &str) -> Result<(f64, f64), String> {
    let (lo, hi) = s.split_once([',', ':']).ok_or_else(|| format!("band {s:?} must be lo,hi"))?;
    let num = |v: &str| v.trim().parse::<f64>().map_err(|_| format!("bad frequency {v:?}"));
    Ok((num(lo)?, num(hi)?))
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic flight (or noise-only) recording.
    Simulate(commands::SimulateArgs),
    /// Per-frame energy maps and the argmax baseline estimates.
    Beamform(commands::BeamformArgs),
    /// Per-frame polar band-power images (network inputs).
    Featurize(commands::FeaturizeArgs),
    /// Per-frame ground truth and label masks.
    Label(commands::LabelArgs),
    /// Train the segmentation network.
    Train(commands::TrainArgs),
    /// Run the network and post-processing on features.
    Infer(commands::InferArgs),
    /// Score estimates against ground truth.
    Eval(commands::EvalArgs),
    /// Render a frame of a tensor file as a PNG heatmap with markers.
    Plot(commands::PlotArgs),
    /// Run every stage from one config and compare against the baseline.
    Pipeline(commands::PipelineArgs),
}

fn init_threads() -> Result<(), String> {
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v.trim().parse().map_err(|_| format!("{THREADS_ENV}={v:?} is not a thread count"))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| e.to_string())?;
    }
    Ok(())
}

fn fail(kind: &str, message: &str, code: u8) -> ExitCode {
    eprintln!("{}", serde_json::json!({ "error": kind, "message": message }));
    ExitCode::from(code)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => return fail("validation", e.to_string().trim(), 2),
    };
    if let Err(m) = init_threads() {
        return fail("validation", &m, 2);
    }
    let result = match cli.command {
        Command::Simulate(a) => commands::simulate(a),
        Command::Beamform(a) => commands::beamform(a),
        Command::Featurize(a) => commands::featurize(a),
        Command::Label(a) => commands::label(a),
        Command::Train(a) => commands::train(a),
        Command::Infer(a) => commands::infer(a),
        Command::Eval(a) => commands::eval(a),
        Command::Plot(a) => commands::plot(a),
        Command::Pipeline(a) => commands::pipeline(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.is_validation() => fail("validation", &e.to_string(), 2),
        Err(e) => fail("runtime", &e.to_string(), 3),
    }
}
