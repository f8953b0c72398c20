use std::path::PathBuf;
use std::process::ExitCode;

use aelayers_cli::{CliError, ExperimentConfig, Outcome, Pipeline, Preset, Stage};
use clap::{Parser, Subcommand};

/// Detect adversarial examples from per-layer autoencoder features.
#[derive(Parser)]
#[command(version)]
struct Args {
    /// JSON experiment configuration.
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Built-in configuration used when no --config is given.
    #[arg(long, value_enum)]
    preset: Option<Preset>,
    /// Override a config leaf, e.g. `--set attacks.0.epsilon=0.1`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Worker threads; 1 gives bit-reproducible runs.
    #[arg(long)]
    threads: Option<usize>,
    /// Re-run stages even if the manifest says they are done.
    #[arg(long)]
    force: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Train the target convnet and record its checksum.
    TrainTarget,
    /// Train one autoencoder per tap.
    TrainAes,
    /// Perturb the test set with every configured attack.
    Attack,
    /// Extract per-tap autoencoder features for attacked, noisy and clean samples.
    Features,
    /// Fit and score the supervised and unsupervised detectors.
    Detect,
    /// Collect AUROCs into the evaluation report.
    Evaluate,
    /// Sweep attack strength and track feature growth per tap.
    Trajectory,
    /// Random-forest importances and per-tap depth profile.
    Importance,
    /// Detection AUROC against PGD iteration count.
    StudyPgdIters,
    /// Train on one attack, test on the others.
    StudyTransfer,
    /// Compare feature subsets for the supervised detector.
    StudyAblation,
    /// Every stage in dependency order.
    All,
    /// Print the resolved configuration and its fingerprint.
    ShowConfig,
}

impl Command {
    fn stage(self) -> Option<Stage> {
        Some(match self {
            Command::TrainTarget => Stage::TrainTarget,
            Command::TrainAes => Stage::TrainAes,
            Command::Attack => Stage::Attack,
            Command::Features => Stage::Features,
            Command::Detect => Stage::Detect,
            Command::Evaluate => Stage::Evaluate,
            Command::Trajectory => Stage::Trajectory,
            Command::Importance => Stage::Importance,
            Command::StudyPgdIters => Stage::StudyPgdIters,
            Command::StudyTransfer => Stage::StudyTransfer,
            Command::StudyAblation => Stage::StudyAblation,
            Command::All | Command::ShowConfig => return None,
        })
    }
}

fn run(args: Args) -> Result<(), CliError> {
    let base = match (&args.config, args.preset) {
        (Some(path), _) => ExperimentConfig::from_file(path)?,
        (None, Some(p)) => ExperimentConfig::preset(p),
        (None, None) => return Err(CliError::Config("pass --config <file> or --preset <desk|smoke>".into())),
    };
    let cfg = base.with_overrides(&args.overrides)?;
    if let Some(n) = args.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
    }
    if let Command::ShowConfig = args.command {
        let text = serde_json::to_string_pretty(&cfg).map_err(|e| CliError::Config(e.to_string()))?;
        println!("{text}");
        println!("fingerprint: {}", cfg.fingerprint());
        return Ok(());
    }
    let mut pipeline = Pipeline::open(cfg, args.force)?;
    let results = match args.command.stage() {
        Some(stage) => vec![(stage, pipeline.run(stage)?)],
        None => pipeline.run_all()?,
    };
    for (stage, outcome) in results {
        let what = if outcome == Outcome::Ran { "ran" } else { "up to date" };
        println!("{stage}: {what}");
    }
    println!("run directory: {}", pipeline.dir().display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Args::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::FAILURE
        }
    }
}
