//! Command line frontend for the tomography pipeline. Every invocation
//! writes a self-describing run directory; exit code 2 flags bad inputs or
//! configuration and exit code 1 flags a failed computation, with a JSON
//! error object on stderr either way.

mod commands;
mod run_dir;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use commands::Ctx;
use run_dir::RunDir;
use tuct_core::config::RunConfig;
use tuct_core::{Error, Result};

#[derive(Parser)]
#[command(name = "tuct", version, about = "Transcranial ultrasound tomography pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// Run configuration TOML.
    #[arg(long)]
    config: PathBuf,
    /// Override the master seed from the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; beats TUCT_WORKERS and the configuration.
    #[arg(long)]
    workers: Option<usize>,
    /// Label appended to the timestamped run directory name.
    #[arg(long, default_value = "run")]
    tag: String,
    /// Write into this exact directory instead of runs/<timestamp>-<tag>.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic head phantom and its skull starting model.
    Phantom {
        #[command(flatten)]
        common: CommonArgs,
        /// Index of the phantom in the seeded sequence.
        #[arg(long, default_value_t = 0)]
        index: usize,
    },
    /// Simulate noisy ring-array observations through a model.
    Simulate {
        #[command(flatten)]
        common: CommonArgs,
        /// Two-channel velocity and density grid to simulate through.
        #[arg(long)]
        model: PathBuf,
        /// Fire only the first N sources.
        #[arg(long)]
        sources: Option<usize>,
    },
    /// Reduce observed shots to a physics-informed summary image.
    Summarize {
        #[command(flatten)]
        common: CommonArgs,
        /// Starting model the summary is evaluated at.
        #[arg(long)]
        start: PathBuf,
        /// Directory of .sht shot records.
        #[arg(long)]
        shots: PathBuf,
    },
    /// Reconstruct velocity by full-waveform inversion.
    Fwi {
        #[command(flatten)]
        common: CommonArgs,
        /// Starting model for the inversion.
        #[arg(long)]
        start: PathBuf,
        /// Directory of .sht shot records.
        #[arg(long)]
        shots: PathBuf,
    },
    /// Build the synthetic dataset and train the conditional flow.
    Train {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Draw posterior samples from a trained flow for one summary.
    Sample {
        #[command(flatten)]
        common: CommonArgs,
        /// Trained flow checkpoint (.nfc).
        #[arg(long)]
        checkpoint: PathBuf,
        /// Summary image conditioning the posterior.
        #[arg(long)]
        summary: PathBuf,
        /// Posterior sample count; defaults to the configuration.
        #[arg(long)]
        n_post: Option<usize>,
    },
    /// Score a reconstruction against ground truth.
    Evaluate {
        /// Reconstruction grid; channel 0 is compared.
        #[arg(long)]
        reconstruction: PathBuf,
        /// Ground-truth grid; channel 0 is compared.
        #[arg(long)]
        truth: PathBuf,
        /// Also write metrics.csv and a manifest here.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Measure posterior contraction as the source count grows.
    Contraction {
        #[command(flatten)]
        common: CommonArgs,
        /// Trained flow checkpoint (.nfc).
        #[arg(long)]
        checkpoint: PathBuf,
        /// Posterior sample count; defaults to the configuration.
        #[arg(long)]
        n_post: Option<usize>,
    },
    /// Compare predicted uncertainty against actual error on test phantoms.
    Calibrate {
        #[command(flatten)]
        common: CommonArgs,
        /// Trained flow checkpoint (.nfc).
        #[arg(long)]
        checkpoint: PathBuf,
        /// Posterior sample count; defaults to the configuration.
        #[arg(long)]
        n_post: Option<usize>,
    },
    /// Track posterior-mean quality as the sample count grows.
    SweepNpost {
        #[command(flatten)]
        common: CommonArgs,
        /// Trained flow checkpoint (.nfc).
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        let (code, kind) = classify(&e);
        eprintln!(
            "{}",
            serde_json::json!({"error": {"kind": kind, "message": e.to_string()}})
        );
        std::process::exit(code);
    }
}

/// Exit code 2 for problems with the request itself, 1 for computations
/// that start but cannot finish.
fn classify(e: &Error) -> (i32, &'static str) {
    match e {
        Error::Pair { source, .. } => classify(source),
        Error::Config(_)
        | Error::Io(_)
        | Error::BadMagic { .. }
        | Error::Truncated { .. }
        | Error::DimensionOverflow(_)
        | Error::CflViolation { .. }
        | Error::ShapeMismatch { .. }
        | Error::GridTooSmall { .. }
        | Error::HistoryTooLarge { .. } => (2, "input"),
        Error::Instability { .. }
        | Error::NonFinite { .. }
        | Error::NonFiniteLoss { .. }
        | Error::DegenerateInput { .. }
        | Error::EmptyPool => (1, "compute"),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Phantom { common, index } => {
            with_ctx(&common, "phantom", |ctx| commands::phantom(ctx, index))
        }
        Command::Simulate {
            common,
            model,
            sources,
        } => with_ctx(&common, "simulate", |ctx| {
            commands::simulate(ctx, &model, sources)
        }),
        Command::Summarize {
            common,
            start,
            shots,
        } => with_ctx(&common, "summarize", |ctx| {
            commands::summarize(ctx, &start, &shots)
        }),
        Command::Fwi {
            common,
            start,
            shots,
        } => with_ctx(&common, "fwi", |ctx| commands::fwi(ctx, &start, &shots)),
        Command::Train { common } => with_ctx(&common, "train", commands::train),
        Command::Sample {
            common,
            checkpoint,
            summary,
            n_post,
        } => with_ctx(&common, "sample", |ctx| {
            commands::sample(ctx, &checkpoint, &summary, n_post)
        }),
        Command::Evaluate {
            reconstruction,
            truth,
            out_dir,
        } => commands::evaluate(&reconstruction, &truth, out_dir.as_deref()),
        Command::Contraction {
            common,
            checkpoint,
            n_post,
        } => with_ctx(&common, "contraction", |ctx| {
            commands::contraction(ctx, &checkpoint, n_post)
        }),
        Command::Calibrate {
            common,
            checkpoint,
            n_post,
        } => with_ctx(&common, "calibrate", |ctx| {
            commands::calibrate(ctx, &checkpoint, n_post)
        }),
        Command::SweepNpost { common, checkpoint } => {
            with_ctx(&common, "sweep-npost", |ctx| {
                commands::sweep_npost(ctx, &checkpoint)
            })
        }
    }
}

/// Shared prologue and epilogue: load and validate the configuration,
/// resolve seed and workers, create the run directory, run the command,
/// then seal the manifest.
fn with_ctx(
    common: &CommonArgs,
    name: &str,
    body: impl FnOnce(&mut Ctx) -> Result<()>,
) -> Result<()> {
    let cfg = RunConfig::load(&common.config)?;
    let master_seed = common.seed.unwrap_or(cfg.run.master_seed);
    let workers = resolve_workers(common.workers, &cfg)?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build_global()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let mut dir = RunDir::create(common.out_dir.as_deref(), &common.tag, name)?;
    dir.copy_config(&common.config)?;
    dir.set_seed(master_seed);
    dir.set_workers(workers);
    let mut ctx = Ctx {
        cfg,
        master_seed,
        dir,
    };
    body(&mut ctx)?;
    let root = ctx.dir.finish()?;
    println!("run directory: {}", root.display());
    Ok(())
}

fn resolve_workers(flag: Option<usize>, cfg: &RunConfig) -> Result<usize> {
    let workers = match flag {
        Some(w) => w,
        None => match std::env::var("TUCT_WORKERS") {
            Ok(s) => s.trim().parse().map_err(|_| {
                Error::Config(format!("TUCT_WORKERS must be a positive integer, got {s:?}"))
            })?,
            Err(_) => cfg.run.workers,
        },
    };
    if workers == 0 {
        return Err(Error::Config("worker count must be positive".into()));
    }
    Ok(workers)
}
