//! `omoq`: feature caching, training, seed sweeps, prediction, model
//! selection, method comparison and toy-dataset generation.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "omoq", version, about = "Objective quality estimation for time-scale-modified audio")]
struct Cli {
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Extract features into the cache.
    Features(FeaturesArgs),
    /// Train one model.
    Train(TrainArgs),
    /// Train one model per seed and summarize the best epoch of each.
    Sweep(SweepArgs),
    /// Score WAV files with a checkpoint.
    Predict(PredictArgs),
    /// Pick the minimum-distance epoch from selection reports.
    Select(SelectArgs),
    /// Compare methods over a predictions table.
    Evaluate(EvaluateArgs),
    /// Generate a labelled toy dataset of tones degraded by noise.
    Synth(SynthArgs),
}

/// Settings shared by everything that extracts or trains.
#[derive(Args, Clone)]
struct Settings {
    /// `key = value` config file (flags override it).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Feature cache directory.
    #[arg(long, env = "OMOQ_CACHE_DIR")]
    cache_dir: Option<PathBuf>,
    /// Disable the feature cache.
    #[arg(long, conflicts_with = "cache_dir")]
    no_cache: bool,
    /// Worker threads for feature extraction.
    #[arg(long)]
    workers: Option<usize>,
    /// Extra config entries as key=value (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args)]
struct FeaturesArgs {
    #[command(flatten)]
    settings: Settings,
    /// Manifest CSV whose rows are extracted.
    #[arg(long, conflicts_with = "inputs")]
    manifest: Option<PathBuf>,
    /// WAV files to extract.
    inputs: Vec<PathBuf>,
    #[arg(long)]
    kind: Option<String>,
    /// Also fit and write standardization statistics (training rows only when
    /// a manifest is given).
    #[arg(long)]
    standardize: Option<String>,
}

#[derive(Args, Clone)]
struct ModelArgs {
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    features: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    settings: Settings,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory (default `runs/<model>-<features>-seed<seed>`).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    settings: Settings,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    manifest: PathBuf,
    /// Inclusive range `a..b` or a comma-separated list.
    #[arg(long, default_value = "0..29")]
    seeds: String,
    /// Runs trained at once.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    #[arg(long, default_value = "sweep")]
    out: PathBuf,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Score every row of this manifest and write a predictions table.
    #[arg(long, conflicts_with = "inputs")]
    manifest: Option<PathBuf>,
    /// Output CSV (default stdout).
    #[arg(long)]
    out: Option<PathBuf>,
    inputs: Vec<PathBuf>,
}

#[derive(Args)]
struct SelectArgs {
    /// Report CSVs or run directories containing `report.csv`.
    #[arg(required = true)]
    reports: Vec<PathBuf>,
    /// Write the selected row here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Predictions CSV `file,method,beta,class,omos[,smos]`.
    #[arg(long)]
    preds: PathBuf,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    #[arg(long)]
    out: PathBuf,
    /// Pooled-variance t-test instead of Welch.
    #[arg(long)]
    pooled: bool,
    /// Also test within each signal class.
    #[arg(long)]
    stratify: bool,
    /// Keep β = 1 and β < 0.25 rows.
    #[arg(long)]
    no_exclusions: bool,
    #[arg(long, default_value_t = 0.25)]
    bin_width: f64,
    /// Manifest whose cached frame counts feed the frames-per-MOS histogram.
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long, env = "OMOQ_CACHE_DIR")]
    cache_dir: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 20)]
    clips: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Put every clip in the training split.
    #[arg(long)]
    all_train: bool,
    #[arg(long)]
    min_seconds: Option<f64>,
    #[arg(long)]
    max_seconds: Option<f64>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("invalid arguments");
            eprintln!("{}", first.trim());
            return ExitCode::from(2);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let result = match cli.command {
        Command::Features(a) => commands::features(a),
        Command::Train(a) => commands::train(a),
        Command::Sweep(a) => commands::sweep(a),
        Command::Predict(a) => commands::predict(a),
        Command::Select(a) => commands::select(a),
        Command::Evaluate(a) => commands::evaluate(a),
        Command::Synth(a) => commands::synth(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", one_line(&e));
            ExitCode::FAILURE
        }
    }
}

/// The error chain on one line. Library errors already embed their source in
/// their message, so causes already shown are skipped.
fn one_line(e: &anyhow::Error) -> String {
    let mut msg = String::new();
    for cause in e.chain() {
        let s = cause.to_string();
        if msg.contains(&s) {
            continue;
        }
        if !msg.is_empty() {
            msg.push_str(": ");
        }
        msg.push_str(&s);
    }
    msg.replace('\n', " ")
}
