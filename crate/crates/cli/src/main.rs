//! `sma`: dataset generation, training, attribution analysis, localization
//! evaluation and arm comparison.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use sma_core::{Error, Result};

mod commands;
mod config;
mod run;

use config::RunConfig;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

#[derive(Parser, Debug)]
#[command(name = "sma", version, about = "Shortcut-mitigating augmentation workbench")]
struct Cli {
    /// Run configuration (`key = value` lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overrides `data_seed` for `gen` and `seed` for the other commands.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for `analyze` and `eval`.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render the synthetic dataset (default output: `data_dir`).
    Gen,
    /// Train one run into `<out>/<mode>-<hash8>-s<seed>`.
    Train,
    /// Integrated-gradients SUR/BAR tables and heatmaps.
    Analyze {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Manifest CSV (default: `<data_dir>/val.csv`).
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// CAM pseudo-masks and mIoU.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Score threshold (default: the config's `tau`).
        #[arg(long)]
        tau: Option<f64>,
    },
    /// Compare the runs under a directory.
    Report {
        /// Directory holding run directories, or a single run directory.
        dir: PathBuf,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Io { .. } | Error::Parse { .. } | Error::Format(_) | Error::Integrity(_) => 3,
        Error::Shape { .. } | Error::Contract(_) => 4,
    }
}

fn load_config(cli: &Cli, fallback: Option<&Path>) -> Result<RunConfig> {
    let path = match (&cli.config, fallback) {
        (Some(p), _) => p.clone(),
        (None, Some(p)) => p.to_path_buf(),
        (None, None) => return Err(Error::Config("--config is required".into())),
    };
    if !path.exists() {
        return Err(Error::Config(format!("config file {} not found", path.display())));
    }
    RunConfig::read(&path)
}

/// `config.cfg` next to the checkpoint, used when `--config` is absent.
fn sibling_config(checkpoint: &Path) -> PathBuf {
    checkpoint.parent().unwrap_or(Path::new(".")).join(run::CONFIG_FILE)
}

fn checkpoint_dir(checkpoint: &Path) -> PathBuf {
    checkpoint.parent().unwrap_or(Path::new(".")).to_path_buf()
}

fn execute(cli: &Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::Config("--threads must be ≥ 1".into()));
        }
        sma_core::par::set_threads(n);
    }
    match &cli.command {
        Command::Gen => {
            let mut cfg = load_config(cli, None)?;
            if let Some(s) = cli.seed {
                cfg.dataset.seed = s;
            }
            let out = cli.out.clone().unwrap_or_else(|| cfg.data_dir.clone());
            commands::gen(&cfg, &out)
        }
        Command::Train => {
            let mut cfg = load_config(cli, None)?;
            if let Some(s) = cli.seed {
                cfg.train.seed = s;
            }
            let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("runs"));
            commands::train(&cfg, &out).map(|_| ())
        }
        Command::Analyze { checkpoint, manifest } => {
            let cfg = load_config(cli, Some(&sibling_config(checkpoint)))?;
            let out = cli.out.clone().unwrap_or_else(|| checkpoint_dir(checkpoint));
            commands::analyze(&cfg, checkpoint, manifest.as_deref(), &out)
        }
        Command::Eval {
            checkpoint,
            manifest,
            tau,
        } => {
            let cfg = load_config(cli, Some(&sibling_config(checkpoint)))?;
            let out = cli.out.clone().unwrap_or_else(|| checkpoint_dir(checkpoint));
            commands::eval(&cfg, checkpoint, manifest.as_deref(), tau.unwrap_or(cfg.tau), &out)
        }
        Command::Report { dir } => commands::report(dir).map(|_| ()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
