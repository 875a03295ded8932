mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "scoped", version, about = "Score-curvature typicality OOD detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
pub struct ConfigArgs {
    /// Project config (JSON).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override a config entry, e.g. `--set calibration.variant=two-step`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset from a JSON spec.
    Gen {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write a shifted partner dataset: reward-shift, policy-shift or seed-shift.
        #[arg(long, requires = "pair_out")]
        pair: Option<String>,
        #[arg(long)]
        pair_out: Option<PathBuf>,
    },
    /// Train a score model with denoising score matching.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Loss trace CSV; defaults to `<out>.loss.csv`.
        #[arg(long)]
        loss: Option<PathBuf>,
    },
    /// Trace the signal-fraction curve and pick the scoring steps.
    Snr {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        /// Measure in the model's input space.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        stride: usize,
    },
    /// Fit the offline detector on in-distribution data.
    Calibrate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Per-sample statistics CSV.
        #[arg(long)]
        stats: Option<PathBuf>,
    },
    /// Score a dataset with a calibrated detector.
    Score {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        artifact: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Flag scores above the (1 - alpha) quantile of calibration scores.
        #[arg(long)]
        alpha: Option<f64>,
    },
    /// Evaluate AUROC over the dataset pairs of a manifest.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Per-step AUROC sweep with an oracle row.
        #[arg(long)]
        ablate: bool,
        /// Also evaluate without the sign factor.
        #[arg(long)]
        no_sign: bool,
    },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Gen { spec, out, pair, pair_out } => commands::gen(&spec, &out, pair.as_deref(), pair_out.as_deref()),
        Command::Train { cfg, data, out, loss } => commands::train(&cfg, &data, &out, loss.as_deref()),
        Command::Snr { cfg, data, model, out, stride } => commands::snr(&cfg, &data, model.as_deref(), out.as_deref(), stride),
        Command::Calibrate { cfg, model, data, out, stats } => {
            commands::calibrate(&cfg, &model, &data, &out, stats.as_deref())
        }
        Command::Score { cfg, artifact, model, data, out, alpha } => {
            commands::score(&cfg, &artifact, &model, &data, &out, alpha)
        }
        Command::Eval { cfg, manifest, out_dir, ablate, no_sign } => {
            commands::eval(&cfg, &manifest, &out_dir, ablate, no_sign)
        }
    }
}

/// 2 = bad input, 3 = artifact does not match model or schedule,
/// 4 = numeric failure.
fn exit_code(err: &anyhow::Error) -> u8 {
    match err.chain().find_map(|e| e.downcast_ref::<scoped::Error>()) {
        Some(scoped::Error::FingerprintMismatch(_)) => 3,
        Some(scoped::Error::NonFinite(_)) => 4,
        _ => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
