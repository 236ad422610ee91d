use std::path::PathBuf;
use std::process::ExitCode;

use beamlab::cli::{run, Command, ExperimentConfig};
use clap::Parser;

/// Gaussian-beam quasimodes and resolvent growth on a surface of revolution.
#[derive(Parser, Debug)]
#[command(name = "beamlab", version)]
struct Args {
    #[arg(value_enum)]
    command: Command,
    /// Run directories read by `report`.
    inputs: Vec<PathBuf>,
    /// TOML experiment file; defaults are used when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Root directory for run directories.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Exit with status 3 when a study target is missed.
    #[arg(long)]
    assert: bool,
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated list of h values.
    #[arg(long, value_delimiter = ',')]
    h_list: Option<Vec<f64>>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args = Args::parse();
    let cfg = match args.config.as_deref().map(ExperimentConfig::load).transpose() {
        Ok(c) => c.unwrap_or_default(),
        Err(e) => {
            eprintln!("{e}");
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    let seed = args.seed.unwrap_or(cfg.seed);
    let mut cfg = cfg.with_seed(seed);
    if let Some(out) = args.out {
        cfg.output = out;
    }
    if let Some(t) = args.threads {
        cfg.threads = t;
    }
    if let Some(h) = args.h_list {
        cfg.h_list = h;
    }
    if cfg.threads > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cfg.threads).build_global() {
            log::warn!("thread pool already configured: {e}");
        }
    }
    match run(args.command, &cfg, args.assert, &args.inputs) {
        Ok(outcome) => {
            print!("{}", outcome.summary);
            println!("artifacts: {}", outcome.dir.display());
            if outcome.failures.is_empty() {
                ExitCode::SUCCESS
            } else {
                for f in &outcome.failures {
                    eprintln!("assertion failed: {f}");
                }
                ExitCode::from(3)
            }
        }
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
