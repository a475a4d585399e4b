//! `e2emil`: generate synthetic slides, train, and run the verification
//! suites from the command line.

mod commands;
mod config;
mod error;

use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use e2emil::fabric::{ReductionMode, SchedulerKind};
use e2emil::protocol::TrainMode;

use config::{Overrides, RunConfig};
use error::CliError;

#[derive(Parser)]
#[command(name = "e2emil", version, about = "End-to-end MIL training over a simulated multi-rank fabric")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct GlobalArgs {
    /// Flat TOML config; flags override its values.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, value_enum)]
    mode: Option<ModeArg>,
    /// Encoder ranks N.
    #[arg(long, global = true, value_name = "N")]
    encoders: Option<usize>,
    /// Tiles per encoder rank per step K.
    #[arg(long, global = true, value_name = "K")]
    tiles_per_rank: Option<usize>,
    /// Train only the aggregator.
    #[arg(long, global = true)]
    frozen_encoder: bool,
    #[arg(long, global = true, value_enum)]
    scheduler: Option<SchedulerArg>,
    #[arg(long, global = true, value_enum)]
    reduction: Option<ReductionArg>,
    /// Run directory.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Dataset file (default: <out>/dataset.bin).
    #[arg(long, global = true, value_name = "PATH")]
    dataset: Option<PathBuf>,
    /// Drop the xN pseudo-loss factor (demonstrates that it is needed).
    #[arg(long, global = true)]
    no_n_scaling: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset and its JSON summary.
    GenData,
    /// Train on a dataset and write a run directory.
    Train,
    /// Compare reference and distributed training for N = 1, 2, 5.
    VerifyEquivalence,
    /// Compare autodiff gradients with finite differences over the model grid.
    Gradcheck {
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
    /// Train across the configured K grid and seeds.
    SweepK,
    /// Tabulate finished run directories.
    Report {
        #[arg(required = true, value_name = "RUN_DIR")]
        dirs: Vec<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Distributed,
    Reference,
}

#[derive(Clone, Copy, ValueEnum)]
enum SchedulerArg {
    Sequential,
    Threaded,
}

#[derive(Clone, Copy, ValueEnum)]
enum ReductionArg {
    Deterministic,
    Drift,
}

impl GlobalArgs {
    fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            mode: self.mode.map(|m| match m {
                ModeArg::Distributed => TrainMode::Distributed,
                ModeArg::Reference => TrainMode::Reference,
            }),
            encoders: self.encoders,
            tiles_per_rank: self.tiles_per_rank,
            frozen_encoder: self.frozen_encoder,
            no_n_scaling: self.no_n_scaling,
            scheduler: self.scheduler.map(|s| match s {
                SchedulerArg::Sequential => SchedulerKind::Sequential,
                SchedulerArg::Threaded => SchedulerKind::Threaded,
            }),
            reduction: self.reduction.map(|r| match r {
                ReductionArg::Deterministic => ReductionMode::Deterministic,
                ReductionArg::Drift => ReductionMode::Drift,
            }),
            out: self.out.clone(),
            dataset: self.dataset.clone(),
        }
    }
}

/// Log lines go to stderr and, once a run directory exists, to `run.log`.
struct Tee(Option<File>);

impl Write for Tee {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        std::io::stderr().write_all(buf)?;
        if let Some(f) = &mut self.0 {
            f.write_all(buf)?;
        }
        Ok(buf.len())
    }

    fn flush(&mut self) -> std::io::Result<()> {
        if let Some(f) = &mut self.0 {
            f.flush()?;
        }
        std::io::stderr().flush()
    }
}

fn init_logging(log_file: Option<&Path>) -> Result<(), CliError> {
    let file = log_file
        .map(|p| File::create(p).map_err(|e| CliError::io(p, e)))
        .transpose()?;
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("E2EMIL_LOG", "info"))
        .format_timestamp(None)
        .target(env_logger::Target::Pipe(Box::new(Tee(file))))
        .try_init()
        .map_err(|e| CliError::Internal(e.to_string()))
}

/// Creates the run directory if its parent exists.
fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    if dir.is_dir() {
        return Ok(());
    }
    std::fs::create_dir(dir).map_err(|e| CliError::io(dir, e))
}

/// Makes the run directory, echoes the resolved config into it and starts
/// logging.
fn open_run(cfg: &RunConfig) -> Result<(), CliError> {
    ensure_dir(&cfg.out)?;
    let echo = cfg.out.join("config.toml");
    std::fs::write(&echo, cfg.to_toml()).map_err(|e| CliError::io(&echo, e))?;
    init_logging(Some(&cfg.out.join("run.log")))?;
    log::info!("resolved config written to {}", echo.display());
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = RunConfig::resolve(cli.global.config.as_deref(), &cli.global.overrides())?;
    if let Command::Report { dirs } = &cli.command {
        let out = cli.global.out.as_deref();
        match out {
            Some(dir) => {
                ensure_dir(dir)?;
                init_logging(Some(&dir.join("run.log")))?;
            }
            None => init_logging(None)?,
        }
        return commands::report(dirs, out);
    }
    open_run(&cfg)?;
    match cli.command {
        Command::GenData => commands::gen_data(&cfg),
        Command::Train => commands::train(&cfg),
        Command::VerifyEquivalence => commands::verify_equivalence(&cfg),
        Command::Gradcheck { inject_fault } => commands::gradcheck(&cfg, inject_fault),
        Command::SweepK => commands::sweep(&cfg),
        Command::Report { .. } => unreachable!("handled above"),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            if log::max_level() == log::LevelFilter::Off {
                eprintln!("error: {e}");
            } else {
                log::error!("{e}");
            }
            e.exit_code()
        }
    }
}
