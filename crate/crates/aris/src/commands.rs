//! What each subcommand does, minus argument parsing.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use anyhow::{Context, Result};
use aris_core::metrics::MetricsReport;
use aris_core::sim::{self, SimOutput};

use crate::config::RunConfig;
use crate::evaluate::{assemble, read_annotations, read_detections, write_confusion, write_metrics, write_pr_curves};
use crate::ops::{replay, summary_text, write_ops, write_report, BreachLog, ReplaySummary};
use crate::server::{ServeOptions, Server, WallClock};

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>> {
    let path = dir.join(name);
    let f = File::create(&path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(f))
}

/// Run the simulation and write report, summary and operations log into
/// `out`.
pub fn simulate(cfg: &RunConfig, out: &Path) -> Result<SimOutput> {
    let sim_cfg = cfg.sim_config()?;
    let result = sim::run(&sim_cfg).context("simulation failed")?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write_ops(create(out, &cfg.logs.operations)?, &result.ops)?;
    write_report(create(out, &cfg.logs.report)?, &result.report)?;
    let mut snapshot = cfg.clone();
    snapshot.sim.timing_noise_ms = sim_cfg.timing_noise_ms;
    fs::write(out.join(&cfg.logs.summary), summary_text(&result.report, &snapshot.to_toml()))?;
    Ok(result)
}

pub fn evaluate(annotations: &Path, detections: &Path, out: &Path) -> Result<MetricsReport> {
    let ann = read_annotations(annotations)?;
    let dets = read_detections(detections)?;
    let (dets, gts) = assemble(&ann, &dets);
    let report = MetricsReport::evaluate(&dets, &gts)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write_metrics(create(out, "metrics.csv")?, &report)?;
    write_confusion(create(out, "confusion.csv")?, &report)?;
    write_pr_curves(create(out, "pr_curves.csv")?, &report)?;
    Ok(report)
}

pub fn replay_file(path: &Path) -> Result<ReplaySummary> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    Ok(replay(std::io::BufReader::new(f)))
}

/// Serve until `stop` is set. Breaches are appended to the breach log in
/// `log_dir`.
pub fn serve_plc(cfg: &RunConfig, endpoint: &str, log_dir: &Path, stop: Arc<AtomicBool>) -> Result<()> {
    cfg.layout.validate(&cfg.calibration)?;
    fs::create_dir_all(log_dir).with_context(|| format!("creating {}", log_dir.display()))?;
    let path: PathBuf = log_dir.join(&cfg.logs.breaches);
    let fresh = !path.exists();
    let file = fs::OpenOptions::new().create(true).append(true).open(&path)?;
    let mut breach_log = BreachLog::new(file, fresh)?;
    let opts = ServeOptions {
        endpoint: endpoint.to_string(),
        layout: cfg.layout.clone(),
        tick: Duration::from_millis(cfg.wire.tick_ms.max(1)),
        poll: Duration::from_millis(50),
    };
    let server = Server::start(opts, Arc::new(WallClock::new()))?;
    log::info!("listening on {}", server.local_addr);
    let mut flicks = 0u64;
    while !stop.load(Ordering::Relaxed) {
        while let Ok(e) = server.actuations.try_recv() {
            flicks += 1;
            log::debug!("paddle {} {}..{} ms", e.paddle, e.start, e.end);
        }
        while let Ok(b) = server.breaches.try_recv() {
            log::warn!("breach {}: {}", b.reason.as_str(), b.raw_line);
            breach_log.append(&b)?;
        }
        std::thread::sleep(Duration::from_millis(20));
    }
    let (session, actuations, breaches) = server.shutdown()?;
    flicks += actuations.try_iter().count() as u64;
    for b in breaches.try_iter() {
        breach_log.append(&b)?;
    }
    let c = session.lock().expect("session lock").scheduler().counters();
    log::info!("shutdown: {flicks} flicks, {} accepted, {} breaches", c.accepted, c.breaches);
    Ok(())
}
