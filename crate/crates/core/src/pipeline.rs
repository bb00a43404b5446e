//! End-to-end runs: scene → corruption → backend → frame log → monitor.
//!
//! The live path and the replay path feed the monitor from the same
//! [`FrameLogRecord`], so a replayed log reproduces the live risk trace
//! exactly.

use std::collections::{BTreeSet, HashMap};
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::Isometry3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ba::{SlidingWindowBa, SolveOutput, TrackingState};
use crate::corruption::{self, CorruptionSpec, RunSpec};
use crate::error::{Error, Result};
use crate::evaluation::{self, EvalConfig, EvalReport, RunRecord};
use crate::io::{
    Calibration, EndRecord, ExperimentConfig, FeatureRecord, FrameLog, FrameLogRecord, FrameSummary, LogHeader,
    RawHessianRecord, RiskRow, RunStatus, FLAG_INJECTED_OUTLIER,
};
use crate::risk::{calibrate_threshold, FrameStatus, Monitor, MonitorConfig, RiskEntry};
use crate::scene::{generate_scenario, FrameObservations, Scenario};
use crate::uncertainty::schur_complement_for;

pub fn frame_status(state: TrackingState) -> FrameStatus {
    match state {
        TrackingState::Initializing => FrameStatus::Initializing,
        TrackingState::Tracking => FrameStatus::Tracking,
        TrackingState::Lost => FrameStatus::Lost,
    }
}

/// Marginalizes the backend output for the features of the current frame.
pub fn frame_record(
    out: &SolveOutput,
    frame: &FrameObservations,
    truth: Option<&Isometry3<f64>>,
    run_tag: &str,
    corruption: Option<&CorruptionSpec>,
) -> Result<FrameLogRecord> {
    let injected: HashMap<u64, bool> = frame.observations.iter().map(|o| (o.feature_id, o.is_outlier_injected)).collect();
    let current: Vec<_> = out.current_terms().collect();
    let ids: Vec<u64> = current.iter().map(|t| t.landmark_id).collect::<BTreeSet<_>>().into_iter().collect();
    let features = if ids.is_empty() {
        Vec::new()
    } else {
        let system = schur_complement_for(&out.hessian, &ids)?;
        current
            .iter()
            .map(|t| {
                let info = system.block(t.landmark_id).expect("block requested above");
                let flags = if injected.get(&t.feature_id).copied().unwrap_or(false) { FLAG_INJECTED_OUTLIER } else { 0 };
                FeatureRecord::new(t.feature_id, &t.residual, &t.jacobian, info, flags)
            })
            .collect()
    };
    let estimate = out.current_pose().or_else(|| out.pose_estimates.last().map(|(_, p)| p));
    let pose_error_m = match (estimate, truth) {
        (Some(e), Some(t)) => Some((e.translation.vector - t.translation.vector).norm()),
        _ => None,
    };
    let outlier_ratio = if out.observations > 0 { out.outliers as f64 / out.observations as f64 } else { 0.0 };
    Ok(FrameLogRecord {
        frame_id: out.frame_id,
        timestamp_s: out.timestamp,
        run_tag: run_tag.to_owned(),
        corruption: corruption.cloned(),
        status: frame_status(out.state),
        summary: FrameSummary {
            n_features: features.len(),
            pose_error_m,
            iterations: out.iterations,
            lambda_lm: out.lambda,
            outlier_ratio,
            noise_sigma_px: Some(out.noise_sigma),
        },
        features,
    })
}

/// Feeds one logged frame to the monitor.
pub fn monitor_record(monitor: &mut Monitor<f64>, record: &FrameLogRecord) -> RiskEntry<f64> {
    monitor.process_features(record.frame_id, record.timestamp_s, record.status, &record.inputs(), record.summary.outlier_ratio)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RunTiming {
    pub frames: usize,
    pub backend_seconds: f64,
    /// Marginalization, per-feature propagation and the monitor.
    pub risk_seconds: f64,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub spec: RunSpec,
    pub log: FrameLog,
    pub entries: Vec<RiskEntry<f64>>,
    pub timing: RunTiming,
}

impl RunOutput {
    pub fn diverged(&self) -> bool {
        self.log.diverged()
    }

    pub fn rows(&self) -> Vec<RiskRow> {
        self.entries.iter().map(RiskRow::from).collect()
    }

    pub fn tag(&self) -> String {
        self.spec.tag()
    }

    pub fn record(&self) -> Result<RunRecord> {
        RunRecord::from_log(&self.log, self.rows())
    }
}

/// Scenario and corrupted observations of a run.
pub fn prepare(config: &ExperimentConfig, run: &RunSpec) -> Result<(Scenario, Vec<FrameObservations>)> {
    let scenario_config = crate::scene::ScenarioConfig { seed: run.scenario_seed, ..config.scenario.clone() };
    run.corruption.validate(scenario_config.num_frames)?;
    let scenario = generate_scenario(&scenario_config)?;
    let frames = corruption::apply(&run.corruption, &config.severity, &scenario.intrinsics, &scenario.frames);
    Ok((scenario, frames))
}

/// Runs one spec with the monitor attached. Backend divergence ends the run
/// early and is recorded in the log, not returned as an error.
pub fn run_one(config: &ExperimentConfig, run: &RunSpec, threshold: Option<f64>) -> Result<RunOutput> {
    let (scenario, frames) = prepare(config, run)?;
    let tag = run.tag();
    let spec = (!run.corruption.is_identity()).then(|| run.corruption.clone());
    let mut ba = SlidingWindowBa::new(config.backend.clone(), scenario.intrinsics, scenario.truth.poses[0])?;
    let mut monitor = Monitor::new(config.monitor.clone(), threshold)?;
    let mut log = FrameLog {
        header: LogHeader::new(tag.clone(), scenario.config.frame_interval(), spec.clone()),
        frames: Vec::with_capacity(frames.len()),
        raw_hessians: Vec::new(),
        end: None,
    };
    let mut entries = Vec::with_capacity(frames.len());
    let mut timing = RunTiming::default();
    for (k, frame) in frames.iter().enumerate() {
        let t0 = Instant::now();
        let solved = ba.process_frame(frame);
        timing.backend_seconds += t0.elapsed().as_secs_f64();
        let out = match solved {
            Ok(out) => out,
            Err(Error::Diverged { frame, reason }) => {
                log.end = Some(EndRecord { status: RunStatus::Diverged, frames: log.frames.len(), failure_frame: Some(frame), reason: Some(reason) });
                break;
            }
            Err(e) => return Err(e),
        };
        let t1 = Instant::now();
        let record = frame_record(&out, frame, scenario.truth.poses.get(k), &tag, spec.as_ref())?;
        entries.push(monitor_record(&mut monitor, &record));
        timing.risk_seconds += t1.elapsed().as_secs_f64();
        timing.frames += 1;
        let dim = 6 * out.hessian.num_poses + 3 * out.hessian.num_landmarks();
        if dim > 0 && dim <= config.log.raw_hessian_max_dim {
            log.raw_hessians.push(RawHessianRecord::from_hessian(out.frame_id, &out.hessian));
        }
        log.frames.push(record);
    }
    if log.end.is_none() {
        log.end = Some(EndRecord { status: RunStatus::Completed, frames: log.frames.len(), failure_frame: None, reason: None });
    }
    Ok(RunOutput { spec: run.clone(), log, entries, timing })
}

/// Monitors a stored log.
pub fn replay(log: &FrameLog, monitor: &MonitorConfig, threshold: Option<f64>) -> Result<Vec<RiskEntry<f64>>> {
    let mut m = Monitor::new(monitor.clone(), threshold)?;
    Ok(log.frames.iter().map(|r| monitor_record(&mut m, r)).collect())
}

/// Threshold from clean logs: nearest-rank 95th percentile of the raw risk
/// over all warm, unsaturated frames.
pub fn calibrate(logs: &[FrameLog], monitor: &MonitorConfig) -> Result<Calibration> {
    let mut samples = Vec::new();
    for log in logs {
        for e in replay(log, monitor, None)? {
            if e.calibrating && !e.saturated {
                samples.push(e.raw);
            }
        }
    }
    let threshold = calibrate_threshold(&samples)?;
    Ok(Calibration::new(threshold, samples.len(), logs.len(), monitor.clone()))
}

fn pool(jobs: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::Config(format!("cannot start {jobs} workers: {e}")))
}

/// Runs every spec on a bounded worker pool; results keep input order.
pub fn run_batch(config: &ExperimentConfig, runs: &[RunSpec], threshold: Option<f64>, jobs: usize) -> Result<Vec<RunOutput>> {
    pool(jobs.max(1))?.install(|| runs.par_iter().map(|r| run_one(config, r, threshold)).collect())
}

/// Calibrates on clean replicas of the given scenario seeds.
pub fn calibrate_seeds(config: &ExperimentConfig, seeds: &[u64], jobs: usize) -> Result<Calibration> {
    let clean: Vec<RunSpec> = seeds.iter().map(|&s| RunSpec { scenario_seed: s, corruption: CorruptionSpec::clean(s) }).collect();
    let outputs = run_batch(config, &clean, None, jobs)?;
    let logs: Vec<FrameLog> = outputs.into_iter().map(|o| o.log).collect();
    calibrate(&logs, &config.monitor)
}

pub fn frame_log_path(dir: &Path, tag: &str) -> PathBuf {
    dir.join(format!("{tag}.frames.jsonl"))
}

pub fn risk_csv_path(dir: &Path, tag: &str) -> PathBuf {
    dir.join(format!("{tag}.risk.csv"))
}

pub fn write_run(dir: &Path, output: &RunOutput) -> Result<()> {
    let tag = output.tag();
    output.log.save(&frame_log_path(dir, &tag))?;
    crate::io::save_risk_csv(&risk_csv_path(dir, &tag), &output.rows())
}

/// Loads every `<tag>.frames.jsonl` / `<tag>.risk.csv` pair in `dir`,
/// sorted by tag.
pub fn load_runs(dir: &Path) -> Result<Vec<RunRecord>> {
    let mut tags = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let name = entry?.file_name().to_string_lossy().into_owned();
        if let Some(tag) = name.strip_suffix(".frames.jsonl") {
            tags.push(tag.to_owned());
        }
    }
    tags.sort();
    tags.iter()
        .map(|tag| {
            let log = FrameLog::load(&frame_log_path(dir, tag))?;
            let rows = crate::io::load_risk_csv(&risk_csv_path(dir, tag))?;
            RunRecord::from_log(&log, rows)
        })
        .collect()
}

/// Writes `report.json` and the CSV tables into `dir`.
pub fn write_report(dir: &Path, report: &EvalReport) -> Result<()> {
    let json = serde_json::to_string_pretty(report).map_err(|e| Error::Config(e.to_string()))?;
    std::fs::write(dir.join("report.json"), json + "\n")?;
    let csv_err = |e: csv::Error| Error::Config(e.to_string());

    let mut w = csv::Writer::from_path(dir.join("auc.csv")).map_err(csv_err)?;
    w.write_record(["indicator", "auc"]).map_err(csv_err)?;
    for (indicator, auc) in &report.auc_per_indicator {
        w.write_record([indicator.name().to_owned(), auc.map_or(String::new(), |a| a.to_string())]).map_err(csv_err)?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(dir.join("policy.csv")).map_err(csv_err)?;
    w.write_record(["k", "recall", "fpr", "precision", "true_positives", "false_positives", "false_negatives", "true_negatives"])
        .map_err(csv_err)?;
    let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
    for row in &report.policy_table {
        let m = &row.metrics;
        w.write_record([
            row.k.to_string(),
            opt(m.recall),
            opt(m.fpr),
            opt(m.precision),
            m.true_positives.to_string(),
            m.false_positives.to_string(),
            m.false_negatives.to_string(),
            m.true_negatives.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(dir.join("hazard.csv")).map_err(csv_err)?;
    w.write_record(["decile", "count", "mean_score", "failure_probability"]).map_err(csv_err)?;
    for (d, bin) in report.hazard_deciles.iter().enumerate() {
        w.write_record([(d + 1).to_string(), bin.count.to_string(), bin.mean_score.to_string(), bin.failure_probability.to_string()])
            .map_err(csv_err)?;
    }
    w.flush()?;

    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(dir.join("lead_times.csv")).map_err(csv_err)?;
    w.write_record(["tag", "failure_frame", "lead_time_s", "episode_lead_time_s"]).map_err(csv_err)?;
    for row in &report.lead_times {
        w.serialize(row).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Evaluates every run stored in `dir`.
pub fn evaluate_dir(dir: &Path, threshold: f64, config: &EvalConfig) -> Result<EvalReport> {
    let runs = load_runs(dir)?;
    evaluation::evaluate(&runs, threshold, config)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchReport {
    pub frames: usize,
    pub mean_features: f64,
    /// Wall time per frame without the monitor, µs.
    pub base_us_per_frame: f64,
    /// Wall time per frame with the monitor, µs.
    pub super_us_per_frame: f64,
    /// `(t_super − t_base) / t_base`.
    pub overhead_ratio: f64,
    /// Backend time per frame inside the monitored run, µs.
    pub backend_us_per_frame: f64,
    /// Monitor time per frame inside the monitored run, µs.
    pub risk_us_per_frame: f64,
    /// `risk / backend`.
    pub risk_to_backend: f64,
}

/// Backend-only wall time per frame, best of `repeats`.
fn time_backend(config: &ExperimentConfig, scenario: &Scenario, frames: &[FrameObservations], repeats: usize) -> Result<f64> {
    let mut best = f64::INFINITY;
    for _ in 0..repeats.max(1) {
        let mut ba = SlidingWindowBa::new(config.backend.clone(), scenario.intrinsics, scenario.truth.poses[0])?;
        let t0 = Instant::now();
        for f in frames {
            std::hint::black_box(ba.process_frame(f)?);
        }
        best = best.min(t0.elapsed().as_secs_f64());
    }
    Ok(best / frames.len() as f64)
}

/// Times identical clean runs with and without the monitor.
pub fn bench(config: &ExperimentConfig, seed: u64, repeats: usize) -> Result<BenchReport> {
    let run = RunSpec { scenario_seed: seed, corruption: CorruptionSpec::clean(seed) };
    let (scenario, frames) = prepare(config, &run)?;
    let base = time_backend(config, &scenario, &frames, repeats)?;
    let mut best: Option<RunOutput> = None;
    let mut best_total = f64::INFINITY;
    for _ in 0..repeats.max(1) {
        let t0 = Instant::now();
        let out = run_one(config, &run, None)?;
        let total = t0.elapsed().as_secs_f64();
        if total < best_total {
            best_total = total;
            best = Some(out);
        }
    }
    let out = best.expect("at least one repeat");
    let n = out.timing.frames.max(1) as f64;
    let super_per_frame = (out.timing.backend_seconds + out.timing.risk_seconds) / n;
    let mean_features = out.log.frames.iter().map(|f| f.summary.n_features as f64).sum::<f64>() / n;
    Ok(BenchReport {
        frames: out.timing.frames,
        mean_features,
        base_us_per_frame: base * 1e6,
        super_us_per_frame: super_per_frame * 1e6,
        overhead_ratio: (super_per_frame - base) / base,
        backend_us_per_frame: out.timing.backend_seconds / n * 1e6,
        risk_us_per_frame: out.timing.risk_seconds / n * 1e6,
        risk_to_backend: out.timing.risk_seconds / out.timing.backend_seconds,
    })
}
