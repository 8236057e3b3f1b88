use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::{error, info, warn};

use toposync::error::Error;
use toposync::runner::{self, Command, SimulationConfig};

#[derive(Parser)]
#[command(name = "toposync", version, about = "Synchronization of driven-dissipative oscillator lattices")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Mean-field trajectories for every sweep cell and realization.
    Meanfield(RunArgs),
    /// Averaged spectra across a dimerization or λ1 sweep.
    SpectrumSweep(RunArgs),
    /// Spectra and ω0 peak detection across disorder strengths.
    DisorderSweep(RunArgs),
    /// Time-averaged quantum synchronization matrices.
    SyncMatrix(RunArgs),
    /// Exact two-mode steady states against the Gaussian model.
    ExactCompare(RunArgs),
    /// Check a config and print job count and memory estimate.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `output_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Master seed; overrides `master_seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long)]
    jobs: Option<usize>,
    /// Realizations per sweep cell; overrides `sweep.n_realizations`.
    #[arg(long)]
    realizations: Option<usize>,
}

fn load(args: &RunArgs) -> Result<(SimulationConfig, Vec<u8>), Error> {
    let (mut config, mut bytes) = SimulationConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        config.master_seed = seed;
    }
    if let Some(n) = args.realizations {
        match config.sweep.as_mut() {
            Some(s) => s.n_realizations = n,
            None => return Err(Error::Config("--realizations needs a sweep section".into())),
        }
    }
    if args.seed.is_some() || args.realizations.is_some() {
        bytes = serde_json::to_vec(&config)?;
    }
    Ok((config, bytes))
}

fn execute(command: Command, args: RunArgs) -> ExitCode {
    let (config, bytes) = match load(&args) {
        Ok(c) => c,
        Err(e) => {
            error!("{e}");
            return ExitCode::from(1);
        }
    };
    if let Some(n) = args.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            warn!("thread pool: {e}");
        }
    }
    let out = args.out.unwrap_or_else(|| config.output_dir.clone());
    match runner::run(command, &config, &bytes, &out) {
        Ok(m) => {
            for w in &m.warnings {
                warn!("{w}");
            }
            let failed = m.failed_jobs();
            info!("{}: {} jobs, {failed} failed, output in {}", m.command, m.jobs.len(), out.display());
            if failed > 0 {
                ExitCode::from(2)
            } else {
                ExitCode::SUCCESS
            }
        }
        Err(e @ (Error::Config(_) | Error::InvalidSpec(_) | Error::InvalidInput(_) | Error::TruncationCap { .. })) => {
            error!("{e}");
            ExitCode::from(1)
        }
        Err(e) => {
            error!("{e}");
            ExitCode::from(2)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match cli.command {
        Cmd::Meanfield(a) => execute(Command::Meanfield, a),
        Cmd::SpectrumSweep(a) => execute(Command::SpectrumSweep, a),
        Cmd::DisorderSweep(a) => execute(Command::DisorderSweep, a),
        Cmd::SyncMatrix(a) => execute(Command::SyncMatrix, a),
        Cmd::ExactCompare(a) => execute(Command::ExactCompare, a),
        Cmd::Validate { config } => {
            let report = SimulationConfig::load(&config).and_then(|(c, b)| runner::validate_config(&c, &b));
            match report {
                Ok(r) => {
                    println!("{}", serde_json::to_string_pretty(&r).expect("report serializes"));
                    ExitCode::SUCCESS
                }
                Err(e) => {
                    error!("{e}");
                    ExitCode::from(1)
                }
            }
        }
    }
}
