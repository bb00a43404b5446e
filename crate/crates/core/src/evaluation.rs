//! Offline analysis of monitored runs: degradation labels, ROC AUC, hazard
//! deciles, warning lead time and the stop policy.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{FrameLog, RiskRow};

/// Labels need an error above this, within the horizon, m.
pub const DEFAULT_ERROR_THRESHOLD_M: f64 = 1.0;
pub const DEFAULT_HORIZON: usize = 50;
/// A run has failed when its error exceeds this or the backend diverged, m.
pub const FAILURE_ERROR_M: f64 = 5.0;

#[derive(Debug, Clone, PartialEq)]
pub struct DegradationLabels {
    pub labels: Vec<bool>,
    /// Fewer than `horizon` successors were available.
    pub truncated: Vec<bool>,
    pub threshold_m: f64,
    pub horizon: usize,
}

impl DegradationLabels {
    pub fn positives(&self) -> usize {
        self.labels.iter().filter(|l| **l).count()
    }
}

/// `label_t = max(e_{t+1..=t+N}) > θ`. Tail frames look ahead as far as the
/// series goes and are flagged as truncated.
pub fn label_degradation(errors: &[f64], threshold_m: f64, horizon: usize) -> DegradationLabels {
    let n = errors.len();
    // Scan from the right, remembering the nearest later exceedance.
    let mut labels = vec![false; n];
    let mut truncated = vec![false; n];
    let mut last_exceed: Option<usize> = None;
    for t in (0..n).rev() {
        truncated[t] = t + horizon >= n;
        labels[t] = last_exceed.is_some_and(|k| k - t <= horizon);
        if errors[t] > threshold_m || errors[t].is_nan() {
            last_exceed = Some(t);
        }
    }
    DegradationLabels { labels, truncated, threshold_m, horizon }
}

/// Mann–Whitney AUC with half credit for ties.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    assert_eq!(scores.len(), labels.len(), "scores and labels differ in length");
    let positives = labels.iter().filter(|l| **l).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Sum of midranks of the positives.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]].total_cmp(&scores[order[i]]).is_eq() {
            j += 1;
        }
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += midrank * order[i..=j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j + 1;
    }
    let (p, q) = (positives as f64, negatives as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * q))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HazardBin {
    pub count: usize,
    pub mean_score: f64,
    pub failure_probability: f64,
}

/// Ten equal-count bins by ascending score; ties keep input order.
pub fn hazard_deciles(scores: &[f64], labels: &[bool]) -> Result<Vec<HazardBin>> {
    assert_eq!(scores.len(), labels.len(), "scores and labels differ in length");
    let n = scores.len();
    if n < 10 {
        return Err(Error::Config(format!("hazard deciles need at least 10 samples, got {n}")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    Ok((0..10)
        .map(|d| {
            let bin = &order[d * n / 10..(d + 1) * n / 10];
            let count = bin.len();
            HazardBin {
                count,
                mean_score: bin.iter().map(|&k| scores[k]).sum::<f64>() / count as f64,
                failure_probability: bin.iter().filter(|&&k| labels[k]).count() as f64 / count as f64,
            }
        })
        .collect())
}

/// Seconds between the first warning at or before `failure_frame` and the
/// failure; 0 when nothing warned in time.
pub fn lead_time(rows: &[RiskRow], failure_frame: u64, frame_interval: f64) -> f64 {
    rows.iter()
        .find(|r| r.frame_id <= failure_frame && r.warning())
        .map_or(0.0, |r| (failure_frame - r.frame_id) as f64 * frame_interval)
}

/// Like [`lead_time`], but from the start of the warning episode that is
/// still active on the frame before the failure.
pub fn episode_lead_time(rows: &[RiskRow], failure_frame: u64, frame_interval: f64) -> f64 {
    let before: Vec<&RiskRow> = rows.iter().filter(|r| r.frame_id < failure_frame).collect();
    let mut start = None;
    for r in before.iter().rev() {
        if r.warning() {
            start = Some(r.frame_id);
        } else {
            break;
        }
    }
    start.map_or(0.0, |s| (failure_frame - s) as f64 * frame_interval)
}

/// Index of the first frame that completes `k` consecutive values above
/// `threshold`.
pub fn stop_policy(series: &[f64], threshold: f64, k: usize) -> Option<usize> {
    let k = k.max(1);
    let mut run = 0;
    for (i, v) in series.iter().enumerate() {
        run = if *v > threshold { run + 1 } else { 0 };
        if run >= k {
            return Some(i);
        }
    }
    None
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyOutcome {
    pub triggered: bool,
    pub failed: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolicyMetrics {
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
    pub true_negatives: usize,
    /// Absent without failed runs.
    pub recall: Option<f64>,
    /// Absent without successful runs.
    pub fpr: Option<f64>,
    /// Absent when nothing triggered.
    pub precision: Option<f64>,
}

pub fn policy_metrics(outcomes: &[PolicyOutcome]) -> PolicyMetrics {
    let count = |t: bool, f: bool| outcomes.iter().filter(|o| o.triggered == t && o.failed == f).count();
    let (tp, fp, fn_, tn) = (count(true, true), count(true, false), count(false, true), count(false, false));
    let ratio = |a: usize, b: usize| (b > 0).then(|| a as f64 / b as f64);
    PolicyMetrics {
        true_positives: tp,
        false_positives: fp,
        false_negatives: fn_,
        true_negatives: tn,
        recall: ratio(tp, tp + fn_),
        fpr: ratio(fp, fp + tn),
        precision: ratio(tp, tp + fp),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Indicator {
    SigmaOnly,
    ResidualOnly,
    ConditioningOnly,
    Fused,
}

impl Indicator {
    pub const ALL: [Indicator; 4] = [Indicator::SigmaOnly, Indicator::ResidualOnly, Indicator::ConditioningOnly, Indicator::Fused];

    pub fn score(self, row: &RiskRow) -> f64 {
        match self {
            Indicator::SigmaOnly => row.sigma_bar,
            Indicator::ResidualOnly => row.residual_bar,
            Indicator::ConditioningOnly => row.kappa_bar,
            Indicator::Fused => row.r_raw,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Indicator::SigmaOnly => "sigma_only",
            Indicator::ResidualOnly => "residual_only",
            Indicator::ConditioningOnly => "conditioning_only",
            Indicator::Fused => "fused",
        }
    }
}

/// One monitored run joined with its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub tag: String,
    pub rows: Vec<RiskRow>,
    /// Translation error per row; `+∞` once the backend has failed.
    pub errors: Vec<f64>,
    /// Frame at which the backend gave up.
    pub failure_frame: Option<u64>,
    pub frame_interval: f64,
}

impl RunRecord {
    /// Joins a risk trace with its frame log by frame id.
    pub fn from_log(log: &FrameLog, rows: Vec<RiskRow>) -> Result<Self> {
        let by_frame: BTreeMap<u64, Option<f64>> = log.frames.iter().map(|f| (f.frame_id, f.summary.pose_error_m)).collect();
        let failure_frame = log.end.as_ref().and_then(|e| e.failure_frame).filter(|_| log.diverged());
        let errors = rows
            .iter()
            .map(|r| match by_frame.get(&r.frame_id) {
                Some(Some(e)) => Ok(*e),
                Some(None) => Ok(f64::NAN),
                None => Err(Error::MalformedRecord { line: 0, reason: format!("frame {} missing from log {}", r.frame_id, log.header.run_tag) }),
            })
            .collect::<Result<Vec<f64>>>()?;
        Ok(Self { tag: log.header.run_tag.clone(), rows, errors, failure_frame, frame_interval: log.header.frame_interval_s })
    }

    /// Error series used for labelling: divergence counts as an exceedance
    /// on the frame after the last logged one.
    pub fn labelling_errors(&self) -> Vec<f64> {
        let mut e = self.errors.clone();
        if self.failure_frame.is_some() {
            e.push(f64::INFINITY);
        }
        e
    }

    pub fn labels(&self, threshold_m: f64, horizon: usize) -> DegradationLabels {
        let mut l = label_degradation(&self.labelling_errors(), threshold_m, horizon);
        l.labels.truncate(self.rows.len());
        l.truncated.truncate(self.rows.len());
        l
    }

    pub fn failed(&self) -> bool {
        self.failure_frame.is_some() || self.errors.iter().any(|e| *e > FAILURE_ERROR_M)
    }

    /// First frame whose error exceeds the failure bound, or the divergence
    /// frame.
    pub fn failure_point(&self) -> Option<u64> {
        self.rows
            .iter()
            .zip(&self.errors)
            .find(|(_, e)| **e > FAILURE_ERROR_M)
            .map(|(r, _)| r.frame_id)
            .or(self.failure_frame)
    }

    pub fn smoothed(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.r_smooth).collect()
    }
}

/// Pooled frame-level AUC of one indicator.
pub fn ablation(runs: &[RunRecord], indicator: Indicator, threshold_m: f64, horizon: usize) -> Result<f64> {
    let (scores, labels) = pooled(runs, threshold_m, horizon, |r| indicator.score(r));
    roc_auc(&scores, &labels)
}

fn pooled(runs: &[RunRecord], threshold_m: f64, horizon: usize, score: impl Fn(&RiskRow) -> f64) -> (Vec<f64>, Vec<bool>) {
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for run in runs {
        let l = run.labels(threshold_m, horizon);
        scores.extend(run.rows.iter().map(&score));
        labels.extend(l.labels);
    }
    (scores, labels)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyRow {
    pub k: usize,
    #[serde(flatten)]
    pub metrics: PolicyMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeadTimeRow {
    pub tag: String,
    pub failure_frame: u64,
    pub lead_time_s: f64,
    pub episode_lead_time_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunCounts {
    pub runs: usize,
    pub failed_runs: usize,
    pub frames: usize,
    pub positive_frames: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Absent when the pooled labels have a single class.
    pub auc_per_indicator: BTreeMap<Indicator, Option<f64>>,
    pub hazard_deciles: Vec<HazardBin>,
    pub lead_times: Vec<LeadTimeRow>,
    pub policy_table: Vec<PolicyRow>,
    pub threshold: f64,
    pub run_counts: RunCounts,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub error_threshold_m: f64,
    pub horizon: usize,
    pub policy_k: Vec<usize>,
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.error_threshold_m.is_finite() && self.error_threshold_m > 0.0) {
            return Err(Error::Config("evaluation.error_threshold_m must be positive".into()));
        }
        if self.horizon == 0 {
            return Err(Error::Config("evaluation.horizon must be at least 1".into()));
        }
        if self.policy_k.contains(&0) {
            return Err(Error::Config("evaluation.policy_k entries must be at least 1".into()));
        }
        Ok(())
    }
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { error_threshold_m: DEFAULT_ERROR_THRESHOLD_M, horizon: DEFAULT_HORIZON, policy_k: vec![1, 3, 5, 10, 15, 20] }
    }
}

pub fn policy_table(runs: &[RunRecord], threshold: f64, ks: &[usize]) -> Vec<PolicyRow> {
    ks.iter()
        .map(|&k| {
            let outcomes: Vec<PolicyOutcome> = runs
                .iter()
                .map(|r| PolicyOutcome { triggered: stop_policy(&r.smoothed(), threshold, k).is_some(), failed: r.failed() })
                .collect();
            PolicyRow { k, metrics: policy_metrics(&outcomes) }
        })
        .collect()
}

/// Full report over a batch. Runs are processed in the given order.
pub fn evaluate(runs: &[RunRecord], threshold: f64, config: &EvalConfig) -> Result<EvalReport> {
    let mut auc = BTreeMap::new();
    for indicator in Indicator::ALL {
        let value = match ablation(runs, indicator, config.error_threshold_m, config.horizon) {
            Ok(v) => Some(v),
            Err(Error::SingleClass) => None,
            Err(e) => return Err(e),
        };
        auc.insert(indicator, value);
    }
    let (scores, labels) = pooled(runs, config.error_threshold_m, config.horizon, |r| r.r_raw);
    let hazard = if scores.len() >= 10 { hazard_deciles(&scores, &labels)? } else { Vec::new() };
    let lead_times = runs
        .iter()
        .filter(|r| r.failed())
        .filter_map(|r| {
            let f = r.failure_point()?;
            Some(LeadTimeRow {
                tag: r.tag.clone(),
                failure_frame: f,
                lead_time_s: lead_time(&r.rows, f, r.frame_interval),
                episode_lead_time_s: episode_lead_time(&r.rows, f, r.frame_interval),
            })
        })
        .collect();
    Ok(EvalReport {
        auc_per_indicator: auc,
        hazard_deciles: hazard,
        lead_times,
        policy_table: policy_table(runs, threshold, &config.policy_k),
        threshold,
        run_counts: RunCounts {
            runs: runs.len(),
            failed_runs: runs.iter().filter(|r| r.failed()).count(),
            frames: labels.len(),
            positive_frames: labels.iter().filter(|l| **l).count(),
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn brute_auc(scores: &[f64], labels: &[bool]) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for (i, si) in scores.iter().enumerate() {
            for (j, sj) in scores.iter().enumerate() {
                if labels[i] && !labels[j] {
                    den += 1.0;
                    num += if si > sj { 1.0 } else if si == sj { 0.5 } else { 0.0 };
                }
            }
        }
        num / den
    }

    fn row(frame_id: u64, r: f64, margin: Option<f64>, trend: bool) -> RiskRow {
        RiskRow {
            frame_id,
            t: frame_id as f64 * 0.05,
            sigma_bar: 1.0,
            residual_bar: 1.0,
            kappa_bar: 0.1,
            n_features: 100,
            r_raw: r,
            r_smooth: r,
            r_dot: 0.0,
            margin,
            trend,
            saturated: false,
        }
    }

    #[test]
    fn label_examples() {
        let l = label_degradation(&[0.2; 200], 1.0, 50);
        assert_eq!(l.positives(), 0);

        let errors: Vec<f64> = (0..200).map(|k| if k >= 100 { 2.0 } else { 0.1 }).collect();
        let l = label_degradation(&errors, 1.0, 50);
        for t in 0..100 {
            assert_eq!(l.labels[t], t >= 50, "frame {t}");
        }
        assert!(l.truncated[150] && !l.truncated[149]);

        let errors = [0.0, 0.3, 0.0, 0.1, 0.0];
        let l = label_degradation(&errors, 0.0, 50);
        assert_eq!(l.labels, vec![true, true, true, false, false]);
    }

    #[test]
    fn auc_examples() {
        assert_eq!(roc_auc(&[0.9, 0.8, 0.1], &[true, true, false]).unwrap(), 1.0);
        assert_eq!(roc_auc(&[0.4; 6], &[true, false, true, false, false, true]).unwrap(), 0.5);
        assert_eq!(roc_auc(&[0.9, 0.6, 0.4, 0.2], &[true, false, true, false]).unwrap(), 0.75);
        assert!(matches!(roc_auc(&[0.1, 0.2], &[true, true]), Err(Error::SingleClass)));
    }

    #[test]
    fn hazard_examples() {
        let scores: Vec<f64> = (0..1000).map(|k| (k % 2) as f64).collect();
        let labels: Vec<bool> = scores.iter().map(|s| *s == 1.0).collect();
        let bins = hazard_deciles(&scores, &labels).unwrap();
        assert_eq!(bins[9].failure_probability, 1.0);
        assert_eq!(bins[0].failure_probability, 0.0);

        let scores: Vec<f64> = (0..1003).map(|k| ((k * 7919) % 1003) as f64).collect();
        let labels: Vec<bool> = (0..1003).map(|k| k % 5 == 0).collect();
        let bins = hazard_deciles(&scores, &labels).unwrap();
        let sizes: Vec<usize> = bins.iter().map(|b| b.count).collect();
        assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        let global = labels.iter().filter(|l| **l).count() as f64 / 1003.0;
        let weighted: f64 = bins.iter().map(|b| b.failure_probability * b.count as f64).sum::<f64>() / 1003.0;
        assert!((weighted - global).abs() < 1e-12);
        for b in &bins {
            assert!((b.failure_probability - global).abs() < 0.1, "{b:?}");
        }
    }

    #[test]
    fn lead_time_examples() {
        let mut rows: Vec<RiskRow> = (0..120).map(|k| row(k, 0.0, Some(-1.0), false)).collect();
        rows[80].margin = Some(0.5);
        assert!((lead_time(&rows, 100, 0.05) - 1.0).abs() < 1e-12);
        assert!((episode_lead_time(&rows, 100, 0.05)).abs() < 1e-12);
        let mut late: Vec<RiskRow> = (0..120).map(|k| row(k, 0.0, Some(-1.0), false)).collect();
        late[110].trend = true;
        assert_eq!(lead_time(&late, 100, 0.05), 0.0);
        let mut now: Vec<RiskRow> = (0..5).map(|k| row(k, 0.0, Some(-1.0), false)).collect();
        now[0].trend = true;
        assert_eq!(lead_time(&now, 0, 0.05), 0.0);
        let mut episode: Vec<RiskRow> = (0..120).map(|k| row(k, 0.0, Some(-1.0), false)).collect();
        for r in &mut episode[90..100] {
            r.margin = Some(1.0);
        }
        assert!((episode_lead_time(&episode, 100, 0.05) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn stop_policy_examples() {
        assert_eq!(stop_policy(&[0.5, 1.2, 1.3, 1.4, 0.9], 1.0, 3), Some(3));
        assert_eq!(stop_policy(&[0.5, 0.2, 0.9], 1.0, 1), None);
        assert_eq!(stop_policy(&[0.5, 1.2, 1.3], 1.0, 1), Some(1));
    }

    #[test]
    fn policy_examples() {
        let perfect: Vec<PolicyOutcome> = (0..20).map(|k| PolicyOutcome { triggered: k < 5, failed: k < 5 }).collect();
        let m = policy_metrics(&perfect);
        assert_eq!((m.recall, m.fpr, m.precision), (Some(1.0), Some(0.0), Some(1.0)));

        let always: Vec<PolicyOutcome> = (0..20).map(|k| PolicyOutcome { triggered: true, failed: k < 5 }).collect();
        let m = policy_metrics(&always);
        assert_eq!((m.recall, m.fpr, m.precision), (Some(1.0), Some(1.0), Some(0.25)));

        let none_failed = policy_metrics(&[PolicyOutcome { triggered: true, failed: false }]);
        assert_eq!(none_failed.recall, None);
    }

    /// Confusion counts back-solved from the published K = 10 row.
    pub(crate) fn table_fixture() -> Vec<PolicyOutcome> {
        let mut runs = Vec::new();
        runs.extend((0..49).map(|_| PolicyOutcome { triggered: true, failed: true }));
        runs.extend((0..6).map(|_| PolicyOutcome { triggered: false, failed: true }));
        runs.extend((0..29).map(|_| PolicyOutcome { triggered: true, failed: false }));
        runs.extend((0..315).map(|_| PolicyOutcome { triggered: false, failed: false }));
        runs
    }

    #[test]
    fn published_policy_row() {
        let runs = table_fixture();
        assert_eq!(runs.len(), 399);
        let m = policy_metrics(&runs);
        assert!((m.recall.unwrap() * 100.0 - 89.1).abs() < 0.1);
        assert!((m.fpr.unwrap() * 100.0 - 8.4).abs() < 0.1);
        assert!((m.precision.unwrap() * 100.0 - 62.8).abs() < 0.1);
        assert_eq!(m.true_positives + m.false_positives + m.false_negatives + m.true_negatives, 399);
    }

    #[test]
    fn ablation_examples() {
        let make = |seed: u64| {
            let rows: Vec<RiskRow> = (0..100)
                .map(|k| {
                    let mut r = row(k, 0.0, None, false);
                    r.sigma_bar = ((k * 37 + seed * 11) % 17) as f64 + if k > 60 { 5.0 } else { 0.0 };
                    r.residual_bar = 0.0;
                    r.kappa_bar = 0.0;
                    r
                })
                .collect();
            let errors = (0..100).map(|k| if k > 80 { 2.0 } else { 0.1 }).collect();
            RunRecord { tag: format!("r{seed}"), rows, errors, failure_frame: None, frame_interval: 0.05 }
        };
        let runs = vec![make(1), make(2)];
        assert_eq!(ablation(&runs, Indicator::Fused, 1.0, 50).unwrap(), 0.5);
        let (scores, labels) = pooled(&runs, 1.0, 50, |r| r.sigma_bar);
        assert_eq!(ablation(&runs, Indicator::SigmaOnly, 1.0, 50).unwrap(), roc_auc(&scores, &labels).unwrap());
    }

    #[test]
    fn divergence_counts_as_exceedance() {
        let rows: Vec<RiskRow> = (0..100).map(|k| row(k, 0.0, None, false)).collect();
        let run = RunRecord { tag: "x".into(), rows, errors: vec![0.1; 100], failure_frame: Some(100), frame_interval: 0.05 };
        let l = run.labels(1.0, 50);
        assert_eq!(l.labels.len(), 100);
        assert!(l.labels[50] && !l.labels[48]);
        assert!(run.failed());
        assert_eq!(run.failure_point(), Some(100));
    }

    #[test]
    fn report_counts_are_consistent() {
        let mut runs = Vec::new();
        for s in 0..6u64 {
            let failing = s % 2 == 0;
            let rows: Vec<RiskRow> = (0..100)
                .map(|k| {
                    let r = if failing && k > 70 { 3.0 } else { (k % 5) as f64 * 0.1 };
                    row(k, r, Some(r - 1.0), false)
                })
                .collect();
            let errors = (0..100).map(|k| if failing && k > 90 { 6.0 } else { 0.1 }).collect();
            runs.push(RunRecord { tag: format!("{s}"), rows, errors, failure_frame: None, frame_interval: 0.05 });
        }
        let report = evaluate(&runs, 1.0, &EvalConfig::default()).unwrap();
        assert_eq!(report.run_counts.runs, 6);
        assert_eq!(report.run_counts.failed_runs, 3);
        assert_eq!(report.hazard_deciles.iter().map(|b| b.count).sum::<usize>(), 600);
        for p in &report.policy_table {
            let m = p.metrics;
            assert_eq!(m.true_positives + m.false_positives + m.false_negatives + m.true_negatives, 6);
        }
        assert_eq!(report.lead_times.len(), 3);
        assert!(report.lead_times.iter().all(|l| l.lead_time_s > 0.0));
        let fused = report.auc_per_indicator[&Indicator::Fused].unwrap();
        assert!((0.0..=1.0).contains(&fused));
    }

    proptest! {
        #[test]
        fn auc_matches_pair_counting(data in proptest::collection::vec((0u8..8, any::<bool>()), 2..60)) {
            let scores: Vec<f64> = data.iter().map(|d| d.0 as f64).collect();
            let labels: Vec<bool> = data.iter().map(|d| d.1).collect();
            prop_assume!(labels.iter().any(|l| *l) && labels.iter().any(|l| !*l));
            let auc = roc_auc(&scores, &labels).unwrap();
            prop_assert!((auc - brute_auc(&scores, &labels)).abs() < 1e-12);
            let negated: Vec<f64> = scores.iter().map(|s| -s).collect();
            prop_assert!((auc + roc_auc(&negated, &labels).unwrap() - 1.0).abs() < 1e-12);
            let transformed: Vec<f64> = scores.iter().map(|s| (0.3 * s).exp() * 2.0 + 1.0).collect();
            prop_assert!((auc - roc_auc(&transformed, &labels).unwrap()).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&auc));
        }

        #[test]
        fn larger_k_never_triggers_earlier(series in proptest::collection::vec(-2.0f64..2.0, 1..80), th in -1.0f64..1.0, k in 1usize..10) {
            let a = stop_policy(&series, th, k);
            let b = stop_policy(&series, th, k + 1);
            if let Some(b) = b {
                prop_assert!(a.is_some_and(|a| a <= b));
            }
        }

        #[test]
        fn policy_rates_grow_with_trigger_set(flags in proptest::collection::vec((any::<bool>(), any::<bool>(), any::<bool>()), 1..60)) {
            // Second trigger set contains the first.
            let small: Vec<PolicyOutcome> = flags.iter().map(|f| PolicyOutcome { triggered: f.0 && f.1, failed: f.2 }).collect();
            let large: Vec<PolicyOutcome> = flags.iter().map(|f| PolicyOutcome { triggered: f.0, failed: f.2 }).collect();
            let (a, b) = (policy_metrics(&small), policy_metrics(&large));
            if let (Some(ra), Some(rb)) = (a.recall, b.recall) { prop_assert!(ra <= rb); }
            if let (Some(fa), Some(fb)) = (a.fpr, b.fpr) { prop_assert!(fa <= fb); }
            // Brute-force confusion oracle.
            let tp = large.iter().filter(|o| o.triggered && o.failed).count();
            let failed = large.iter().filter(|o| o.failed).count();
            prop_assert_eq!(b.recall, (failed > 0).then(|| tp as f64 / failed as f64));
        }

        #[test]
        fn decile_probabilities_average_to_base_rate(data in proptest::collection::vec((-5.0f64..5.0, any::<bool>()), 10..300)) {
            let scores: Vec<f64> = data.iter().map(|d| d.0).collect();
            let labels: Vec<bool> = data.iter().map(|d| d.1).collect();
            let bins = hazard_deciles(&scores, &labels).unwrap();
            let n = scores.len() as f64;
            let weighted: f64 = bins.iter().map(|b| b.failure_probability * b.count as f64).sum::<f64>() / n;
            let base = labels.iter().filter(|l| **l).count() as f64 / n;
            prop_assert!((weighted - base).abs() <= 1.0 / n);
            prop_assert!(bins.iter().all(|b| (0.0..=1.0).contains(&b.failure_probability)));
        }
    }
}
