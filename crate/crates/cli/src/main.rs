use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use daisi_cli::config::{ExperimentConfig, ExperimentKind};
use daisi_cli::error::CliError;

#[derive(Parser)]
#[command(
    name = "daisi",
    version,
    about = "Ensemble filtering experiments with generative priors"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Experiment configuration (TOML); defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Master seed, overriding the config.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output root, overriding the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Worker threads (defaults to all cores). Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Train the Lorenz '63 drift network.
    Train,
    /// Run a filter on Lorenz '63 trajectories.
    Filter,
    /// Gaussian-mixture (t_min, eps) ablation.
    Ablate,
    /// Grid search of DAISI hyperparameters by CRPS on Lorenz '63.
    Sweep,
    /// Linear-Gaussian oracle battery.
    Check,
}

impl Command {
    fn kind(self) -> ExperimentKind {
        match self {
            Command::Train => ExperimentKind::Train,
            Command::Filter => ExperimentKind::L63Filter,
            Command::Ablate => ExperimentKind::GmmAblation,
            Command::Sweep => ExperimentKind::Sweep,
            Command::Check => ExperimentKind::LinearGaussianCheck,
        }
    }
}

fn run(cli: &Cli) -> Result<String, CliError> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out = out.clone();
    }
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Config("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(e.to_string()))?;
    }
    daisi_cli::execute(cli.command.kind(), &cfg)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(report) => {
            println!("{report}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
