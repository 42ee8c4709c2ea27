//! `mhajam`: generate synthetic episodes, train, evaluate, plot and run
//! gradient checks.
//!
//! Exit codes: 0 success, 1 usage error, 2 invalid input or configuration,
//! 3 numerical failure (non-finite loss or a failed gradient check).

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

const EXIT_USAGE: u8 = 1;
const EXIT_VALIDATION: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;

#[derive(Debug, Parser)]
#[command(name = "mhajam", version, about = "Multimodal trajectory prediction with joint agent-map attention")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic episode dataset (JSONL).
    GenData(GenDataArgs),
    /// Train a model; writes telemetry and a checkpoint every epoch.
    Train(TrainArgs),
    /// Evaluate a checkpoint next to the physics baselines.
    Eval(EvalArgs),
    /// Render one episode's prediction and attention as SVG.
    Plot(PlotArgs),
    /// Finite-difference check of every primitive and the full loss.
    GradCheck(GradCheckArgs),
}

#[derive(Debug, Args)]
struct GenDataArgs {
    /// straight, t_intersection, four_way or curve.
    #[arg(long, default_value = "four_way")]
    layout: String,
    #[arg(short, long)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(short, long)]
    out: PathBuf,
    /// Neighbor vehicles as MIN,MAX.
    #[arg(long, value_delimiter = ',', num_args = 2)]
    n_vehicles: Option<Vec<usize>>,
    /// Pedestrians as MIN,MAX.
    #[arg(long, value_delimiter = ',', num_args = 2)]
    n_pedestrians: Option<Vec<usize>>,
    /// Vehicle speed range in m/s as MIN,MAX.
    #[arg(long, value_delimiter = ',', num_args = 2)]
    speed: Option<Vec<f64>>,
    /// One probability per exit of the layout, comma separated.
    #[arg(long, value_delimiter = ',')]
    branch_probabilities: Option<Vec<f64>>,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    yield_probability: Option<f64>,
}

#[derive(Debug, Args)]
struct ConfigArgs {
    /// TOML run configuration; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// desk, compact, tiny or paper_scale.
    #[arg(long)]
    preset: Option<String>,
    /// jam, sam, agents_only, map_only or jah.
    #[arg(long)]
    variant: Option<String>,
    /// Number of modes L.
    #[arg(long)]
    modes: Option<usize>,
    #[arg(long)]
    lambda_cl: Option<f64>,
    #[arg(long)]
    lambda_or: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Learning rate of the last epoch as a fraction of --lr; decays linearly.
    #[arg(long)]
    final_lr_fraction: Option<f64>,
    /// Rescale gradients whose global L2 norm exceeds this value.
    #[arg(long)]
    grad_clip: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Training dataset; overrides `data.train`.
    #[arg(long)]
    train: Option<PathBuf>,
    /// Validation dataset; overrides `data.val`.
    #[arg(long)]
    val: Option<PathBuf>,
    /// Output directory; overrides `data.out_dir`.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Optional run configuration that must agree with the checkpoint.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Comma-separated k values.
    #[arg(long, value_delimiter = ',')]
    ks: Option<Vec<usize>>,
    /// Comma-separated miss distances in meters.
    #[arg(short, long, value_delimiter = ',')]
    d: Option<Vec<f64>>,
    /// Modes counted by the off-road rate (default: all).
    #[arg(long)]
    offroad_k: Option<usize>,
    /// Judge off-road by the final point only.
    #[arg(long)]
    final_point: bool,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Write the table here instead of stdout.
    #[arg(short, long)]
    out: Option<PathBuf>,
    /// Write per-episode attention weights as JSONL.
    #[arg(long)]
    attention_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct PlotArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Zero-based episode index in the dataset.
    #[arg(long, default_value_t = 0)]
    episode: usize,
    #[arg(short, long)]
    out: PathBuf,
    /// Attention block drawn as a heatmap.
    #[arg(long, default_value_t = 0)]
    block: usize,
    /// Attention head drawn as a heatmap.
    #[arg(long, default_value_t = 0)]
    head: usize,
    #[arg(long)]
    no_attention: bool,
    /// Also write the episode's attention weights as JSON.
    #[arg(long)]
    attention_json: Option<PathBuf>,
    #[arg(long, default_value_t = 10.0)]
    pixels_per_meter: f64,
}

#[derive(Debug, Args)]
struct GradCheckArgs {
    /// Model preset to check.
    #[arg(long, default_value = "tiny")]
    preset: String,
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    tolerance: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write the full report as JSON.
    #[arg(short, long)]
    out: Option<PathBuf>,
    /// Add an op with a deliberately wrong backward pass.
    #[arg(long, hide = true)]
    corrupt_fixture: bool,
}

/// Failure carrying the process exit code.
#[derive(Debug)]
struct Failure {
    code: u8,
    error: anyhow::Error,
}

fn exit_code(e: &anyhow::Error) -> u8 {
    if e.downcast_ref::<commands::NumericalFailure>().is_some() {
        return EXIT_NUMERICAL;
    }
    match e.downcast_ref::<mhajam::Error>() {
        Some(mhajam::Error::NonFinite(_)) => EXIT_NUMERICAL,
        _ => EXIT_VALIDATION,
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    let result = match cli.command {
        Command::GenData(a) => commands::gen_data(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Plot(a) => commands::plot(a),
        Command::GradCheck(a) => commands::grad_check(a),
    };
    result.map_err(|error| Failure {
        code: exit_code(&error),
        error,
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("MHAJAM_LOG", "info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
