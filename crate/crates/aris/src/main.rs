use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use anyhow::{Context, Result};
use aris::commands;
use aris::config::RunConfig;
use aris::evaluate::metrics_text;
use aris::ops::report_rows;
use aris::LOG_DIR_ENV;
use aris_core::sim::DetectorKind;
use aris_core::MaterialClass;
use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "aris", version, about = "Paddle-sorter simulator, evaluator and PLC emulator")]
struct Cli {
    /// Output directory (overrides the config and the log-directory variable).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum DetectorArg {
    Oracle,
    Stochastic,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the line end to end and write report and operations log.
    Simulate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Class sent to the positive bin.
        #[arg(long)]
        target: Option<MaterialClass>,
        #[arg(long)]
        detector: Option<DetectorArg>,
        #[arg(long)]
        particles: Option<u64>,
    },
    /// Score a detections CSV against a directory of YOLO annotations.
    Evaluate {
        #[arg(long)]
        annotations: PathBuf,
        #[arg(long)]
        detections: PathBuf,
    },
    /// Recompute counters from an operations log.
    Replay { log: PathBuf },
    /// Run the PLC emulator until interrupted.
    ServePlc {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Listen address, e.g. 127.0.0.1:50210.
        #[arg(long)]
        endpoint: Option<String>,
    },
}

fn load(config: Option<&PathBuf>) -> Result<RunConfig> {
    match config {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn out_dir(cli_out: Option<PathBuf>, cfg: &RunConfig) -> PathBuf {
    cli_out
        .or_else(|| std::env::var_os(LOG_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| cfg.log_dir())
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Simulate { config, seed, target, detector, particles } => {
            let mut cfg = load(config.as_ref())?;
            if let Some(s) = seed {
                cfg.sim.seed = s;
            }
            if let Some(t) = target {
                cfg.sim.target = t;
            }
            if let Some(d) = detector {
                cfg.sim.detector = match d {
                    DetectorArg::Oracle => DetectorKind::Oracle,
                    DetectorArg::Stochastic => DetectorKind::Stochastic,
                };
            }
            if let Some(n) = particles {
                cfg.sim.particles = n;
            }
            let out = out_dir(cli.out, &cfg);
            let res = commands::simulate(&cfg, &out)?;
            for (k, v) in report_rows(&res.report) {
                println!("{k:<32} {v}");
            }
            println!("wrote {}", out.display());
        }
        Cmd::Evaluate { annotations, detections } => {
            let out = out_dir(cli.out, &RunConfig::default());
            let report = commands::evaluate(&annotations, &detections, &out)?;
            print!("{}", metrics_text(&report));
        }
        Cmd::Replay { log } => {
            let s = commands::replay_file(&log)?;
            print!("{}", s.text());
        }
        Cmd::ServePlc { config, endpoint } => {
            let cfg = load(config.as_ref())?;
            let endpoint = endpoint.unwrap_or_else(|| cfg.wire.endpoint.clone());
            let dir = out_dir(cli.out, &cfg);
            let stop = Arc::new(AtomicBool::new(false));
            let flag = stop.clone();
            ctrlc::set_handler(move || flag.store(true, Ordering::SeqCst)).context("installing signal handler")?;
            commands::serve_plc(&cfg, &endpoint, &dir, stop)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
