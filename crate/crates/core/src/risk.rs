//! Online risk monitor.
//!
//! Per frame: aggregate feature uncertainty into three proxies (mean pixel
//! std, mean residual, mean log-conditioning), z-normalize each over a
//! sliding window, fuse into a scalar risk, smooth, differentiate and raise
//! margin and trend warnings.

use std::collections::VecDeque;

use nalgebra::{Matrix2x3, Matrix3, Vector2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{lit, Real};
use crate::uncertainty::FeatureUncertainty;

/// Half-width of the clamp applied to every normalized channel.
pub const CLAMP_LIMIT: f64 = 3.0;
/// Standard deviations below this make the z-score zero.
pub const MIN_STD: f64 = 1e-9;
/// Quantile used for the clean-data threshold.
pub const THRESHOLD_QUANTILE: f64 = 0.95;
/// Smallest calibration set accepted.
pub const MIN_CALIBRATION_SAMPLES: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MonitorConfig {
    /// Weight of the uncertainty channel.
    pub lambda: f64,
    /// Sliding normalization window, frames.
    pub normalizer_window: usize,
    /// Samples required before z-scores are reported.
    pub warmup_samples: usize,
    /// Moving-average length applied before differentiation.
    pub smoothing_window: usize,
    /// Consecutive rising frames that make a trend.
    pub trend_frames: usize,
    /// Derivative that counts as rising, 1/s.
    pub trend_threshold: f64,
    /// Frame interval used when timestamps do not advance.
    pub fallback_interval: f64,
}

impl Default for MonitorConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            normalizer_window: 75,
            warmup_samples: 10,
            smoothing_window: 7,
            trend_frames: 4,
            trend_threshold: 0.0,
            fallback_interval: 0.05,
        }
    }
}

impl MonitorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(self.lambda >= 0.0) {
            return bad("lambda must be non-negative");
        }
        if self.normalizer_window == 0 || self.smoothing_window == 0 || self.trend_frames == 0 {
            return bad("normalizer_window, smoothing_window and trend_frames must be positive");
        }
        if self.warmup_samples > self.normalizer_window {
            return bad("warmup_samples cannot exceed normalizer_window");
        }
        if !(self.trend_threshold >= 0.0) || !(self.fallback_interval > 0.0) {
            return bad("trend_threshold must be >= 0 and fallback_interval > 0");
        }
        Ok(())
    }
}

/// Frame-level proxies.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameIndicators<T: Real> {
    pub frame_id: u64,
    /// Mean `√tr(Σ_pixel)` over features, px.
    pub sigma_bar: T,
    /// Mean residual norm, px.
    pub residual_bar: T,
    /// Mean `ln κ`.
    pub kappa_bar: T,
    pub feature_count: usize,
    pub outlier_ratio: T,
    pub saturated: bool,
}

/// Means over the frame's features. An empty frame is saturated and its
/// aggregates are `+∞`.
pub fn aggregate_frame<T: Real>(frame_id: u64, features: &[FeatureUncertainty<T>]) -> FrameIndicators<T> {
    let n = features.len();
    if n == 0 {
        let inf = lit::<T>(f64::INFINITY);
        return FrameIndicators {
            frame_id,
            sigma_bar: inf,
            residual_bar: inf,
            kappa_bar: inf,
            feature_count: 0,
            outlier_ratio: T::zero(),
            saturated: true,
        };
    }
    let count = T::from_usize(n).expect("feature count");
    let mean = |f: fn(&FeatureUncertainty<T>) -> T| features.iter().map(f).fold(T::zero(), |a, b| a + b) / count;
    FrameIndicators {
        frame_id,
        sigma_bar: mean(|f| f.sigma_px),
        residual_bar: mean(|f| f.residual_norm),
        kappa_bar: mean(|f| f.log_kappa),
        feature_count: n,
        outlier_ratio: T::zero(),
        saturated: false,
    }
}

/// Sliding-window z-score for one channel.
#[derive(Debug, Clone)]
pub struct Normalizer<T: Real> {
    capacity: usize,
    min_samples: usize,
    window: VecDeque<T>,
}

impl<T: Real> Normalizer<T> {
    pub fn new(capacity: usize, min_samples: usize) -> Self {
        Self { capacity: capacity.max(1), min_samples, window: VecDeque::with_capacity(capacity + 1) }
    }

    pub fn len(&self) -> usize {
        self.window.len()
    }

    pub fn is_empty(&self) -> bool {
        self.window.is_empty()
    }

    pub fn is_warm(&self) -> bool {
        !self.window.is_empty() && self.window.len() >= self.min_samples
    }

    /// Window mean and population standard deviation.
    pub fn stats(&self) -> (T, T) {
        if self.window.is_empty() {
            return (T::zero(), T::zero());
        }
        let n = T::from_usize(self.window.len()).expect("window length");
        let mean = self.window.iter().fold(T::zero(), |a, b| a + *b) / n;
        let var = self.window.iter().fold(T::zero(), |a, b| a + (*b - mean) * (*b - mean)) / n;
        (mean, var.sqrt())
    }

    /// z-score of `x` against the current window, without updating it.
    pub fn score(&self, x: T) -> T {
        if !self.is_warm() {
            return T::zero();
        }
        let (mean, std) = self.stats();
        if std < lit(MIN_STD) {
            T::zero()
        } else {
            (x - mean) / std
        }
    }

    pub fn push(&mut self, x: T) {
        self.window.push_back(x);
        while self.window.len() > self.capacity {
            self.window.pop_front();
        }
    }

    /// Scores `x` against the window, then adds it.
    pub fn zscore_update(&mut self, x: T) -> T {
        let z = self.score(x);
        self.push(x);
        z
    }
}

pub fn clamp3<T: Real>(x: T) -> T {
    let c = lit::<T>(CLAMP_LIMIT);
    if x > c {
        c
    } else if x < -c {
        -c
    } else {
        x
    }
}

/// `sgn(x)·ln(1 + |x|)`.
pub fn signed_log1p<T: Real>(x: T) -> T {
    let m = x.abs().ln_1p();
    if x < T::zero() {
        -m
    } else {
        m
    }
}

/// Clamped channel contributions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RiskComponents<T> {
    pub residual: T,
    /// Uncertainty term before the `λ` weight.
    pub sigma: T,
    /// Compressed conditioning term.
    pub conditioning: T,
}

pub fn risk_components<T: Real>(sigma: T, residual: T, kappa: T) -> RiskComponents<T> {
    RiskComponents { residual: clamp3(residual), sigma: clamp3(sigma), conditioning: signed_log1p(clamp3(kappa)) }
}

/// Fused scalar risk from normalized channels.
pub fn fuse_risk<T: Real>(sigma: T, residual: T, kappa: T, lambda: T) -> T {
    let c = risk_components(sigma, residual, kappa);
    c.residual + lambda * c.sigma + c.conditioning
}

/// Outer bound `(2 + λ)·3 + ln 4` on the fused risk; saturated frames take
/// this value.
pub fn risk_bound<T: Real>(lambda: T) -> T {
    let three = lit::<T>(CLAMP_LIMIT);
    (lit::<T>(2.0) + lambda) * three + lit::<T>(4.0).ln()
}

/// Moving average over the last `window` raw values.
#[derive(Debug, Clone)]
pub struct Smoother<T: Real> {
    window: usize,
    raw: VecDeque<T>,
    previous: Option<T>,
}

impl<T: Real> Smoother<T> {
    pub fn new(window: usize) -> Self {
        Self { window: window.max(1), raw: VecDeque::new(), previous: None }
    }

    /// Returns the smoothed value and its derivative, `Δsmooth / Δt`.
    pub fn push(&mut self, r: T, dt: T) -> (T, T) {
        self.raw.push_back(r);
        while self.raw.len() > self.window {
            self.raw.pop_front();
        }
        let smooth = mean_in_order(self.raw.iter().copied());
        let rate = match self.previous {
            Some(prev) if dt > T::zero() => (smooth - prev) / dt,
            _ => T::zero(),
        };
        self.previous = Some(smooth);
        (smooth, rate)
    }
}

fn mean_in_order<T: Real>(values: impl ExactSizeIterator<Item = T>) -> T {
    let n = T::from_usize(values.len()).expect("window length");
    values.fold(T::zero(), |a, b| a + b) / n
}

/// Offline moving average, identical in rounding to [`Smoother`].
pub fn moving_average<T: Real>(raw: &[T], window: usize) -> Vec<T> {
    let window = window.max(1);
    (0..raw.len())
        .map(|k| mean_in_order(raw[k.saturating_sub(window - 1)..=k].iter().copied()))
        .collect()
}

/// Flags a trend after `frames` consecutive derivatives above `threshold`.
#[derive(Debug, Clone)]
pub struct TrendDetector<T> {
    frames: usize,
    threshold: T,
    run: usize,
}

impl<T: Real> TrendDetector<T> {
    pub fn new(frames: usize, threshold: T) -> Self {
        Self { frames: frames.max(1), threshold, run: 0 }
    }

    pub fn push(&mut self, rate: T) -> bool {
        self.run = if rate > self.threshold { self.run + 1 } else { 0 };
        self.run >= self.frames
    }
}

/// Nearest-rank 95th percentile of clean risk samples.
pub fn calibrate_threshold<T: Real>(samples: &[T]) -> Result<T> {
    nearest_rank(samples, THRESHOLD_QUANTILE)
}

pub fn nearest_rank<T: Real>(samples: &[T], quantile: f64) -> Result<T> {
    if samples.len() < MIN_CALIBRATION_SAMPLES {
        return Err(Error::InsufficientCalibrationData(samples.len()));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let rank = ((quantile * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    Ok(sorted[rank - 1])
}

/// Application-level risk, `r · S`.
pub fn risk_to_iso<T: Real>(risk: T, severity: T) -> T {
    risk * severity
}

/// Tracking status of the frame fed to the monitor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrameStatus {
    /// No estimate yet; the frame is neutral.
    Initializing,
    #[default]
    Tracking,
    /// Feature support collapsed.
    Lost,
}

/// Per-feature inputs in marginalized form.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureInput<T: Real> {
    pub feature_id: u64,
    pub residual: Vector2<T>,
    pub jacobian: Matrix2x3<T>,
    /// Marginal landmark information block.
    pub information: Matrix3<T>,
}

impl<T: Real> FeatureInput<T> {
    pub fn evaluate(&self) -> FeatureUncertainty<T> {
        FeatureUncertainty::evaluate(self.feature_id, self.residual.norm(), &self.jacobian, &self.information)
    }
}

/// One row of the risk trace.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RiskEntry<T: Real> {
    pub frame_id: u64,
    pub timestamp: T,
    pub indicators: FrameIndicators<T>,
    pub components: RiskComponents<T>,
    pub raw: T,
    pub smooth: T,
    /// Derivative of the smoothed risk, 1/s.
    pub rate: T,
    /// `smooth − r_th`, `+∞` for saturated frames, absent when uncalibrated.
    pub margin: Option<T>,
    pub trend: bool,
    pub saturated: bool,
    /// Normalizers were warm; only such frames calibrate the threshold.
    pub calibrating: bool,
}

impl<T: Real> RiskEntry<T> {
    /// Margin above zero or an active trend.
    pub fn warning(&self) -> bool {
        self.trend || self.margin.is_some_and(|m| m > T::zero())
    }
}

/// Stateful per-sequence monitor. The threshold is fixed at construction.
#[derive(Debug, Clone)]
pub struct Monitor<T: Real> {
    config: MonitorConfig,
    threshold: Option<T>,
    sigma: Normalizer<T>,
    residual: Normalizer<T>,
    kappa: Normalizer<T>,
    smoother: Smoother<T>,
    trend: TrendDetector<T>,
    last_time: Option<T>,
}

impl<T: Real> Monitor<T> {
    pub fn new(config: MonitorConfig, threshold: Option<T>) -> Result<Self> {
        config.validate()?;
        let n = config.normalizer_window;
        let w = config.warmup_samples;
        Ok(Self {
            sigma: Normalizer::new(n, w),
            residual: Normalizer::new(n, w),
            kappa: Normalizer::new(n, w),
            smoother: Smoother::new(config.smoothing_window),
            trend: TrendDetector::new(config.trend_frames, lit(config.trend_threshold)),
            last_time: None,
            threshold,
            config,
        })
    }

    pub fn threshold(&self) -> Option<T> {
        self.threshold
    }

    pub fn config(&self) -> &MonitorConfig {
        &self.config
    }

    /// Full per-frame chain from marginalized feature inputs.
    pub fn process_features(
        &mut self,
        frame_id: u64,
        timestamp: T,
        status: FrameStatus,
        features: &[FeatureInput<T>],
        outlier_ratio: T,
    ) -> RiskEntry<T> {
        let evaluated: Vec<FeatureUncertainty<T>> = match status {
            FrameStatus::Tracking => features.iter().map(FeatureInput::evaluate).collect(),
            _ => Vec::new(),
        };
        let mut indicators = aggregate_frame(frame_id, &evaluated);
        indicators.outlier_ratio = outlier_ratio;
        if status == FrameStatus::Initializing {
            indicators = FrameIndicators {
                sigma_bar: T::zero(),
                residual_bar: T::zero(),
                kappa_bar: T::zero(),
                saturated: false,
                ..indicators
            };
        }
        self.process_indicators(indicators, timestamp, status)
    }

    /// Normalize, fuse, smooth and flag one frame.
    pub fn process_indicators(&mut self, indicators: FrameIndicators<T>, timestamp: T, status: FrameStatus) -> RiskEntry<T> {
        let dt = match self.last_time {
            Some(prev) if timestamp > prev => timestamp - prev,
            _ => lit(self.config.fallback_interval),
        };
        self.last_time = Some(timestamp);
        let lambda = lit::<T>(self.config.lambda);
        let saturated = indicators.saturated || status == FrameStatus::Lost;
        let (raw, components, calibrating) = if status == FrameStatus::Initializing {
            (T::zero(), RiskComponents { residual: T::zero(), sigma: T::zero(), conditioning: T::zero() }, false)
        } else if saturated {
            let c = lit::<T>(CLAMP_LIMIT);
            let top = RiskComponents { residual: c, sigma: c, conditioning: c.ln_1p() };
            (risk_bound(lambda), top, false)
        } else {
            let warm = self.sigma.is_warm();
            let s = self.sigma.zscore_update(indicators.sigma_bar);
            let r = self.residual.zscore_update(indicators.residual_bar);
            let k = self.kappa.zscore_update(indicators.kappa_bar);
            let c = risk_components(s, r, k);
            (c.residual + lambda * c.sigma + c.conditioning, c, warm)
        };
        let (smooth, rate) = self.smoother.push(raw, dt);
        let trend = self.trend.push(rate);
        let margin = if saturated {
            Some(lit(f64::INFINITY))
        } else {
            self.threshold.map(|th| smooth - th)
        };
        RiskEntry {
            frame_id: indicators.frame_id,
            timestamp,
            indicators: FrameIndicators { saturated, ..indicators },
            components,
            raw,
            smooth,
            rate,
            margin,
            trend,
            saturated,
            calibrating,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::Matrix2;
    use proptest::prelude::*;

    fn feature(trace: f64, residual: f64, log_kappa: f64) -> FeatureUncertainty<f64> {
        FeatureUncertainty {
            feature_id: 0,
            world_covariance: Matrix3::identity(),
            pixel_covariance: Matrix2::identity() * (trace / 2.0),
            sigma_px: trace.sqrt(),
            residual_norm: residual,
            kappa: log_kappa.exp(),
            log_kappa,
            depth_sensitivity: None,
            saturated: false,
        }
    }

    #[test]
    fn aggregate_means() {
        let f = [feature(4.0, 1.0, 1.0), feature(9.0, 3.0, 3.0)];
        let a = aggregate_frame(7, &f);
        assert_relative_eq!(a.sigma_bar, 2.5);
        assert_relative_eq!(a.residual_bar, 2.0);
        assert_relative_eq!(a.kappa_bar, 2.0);
        assert_eq!(a.feature_count, 2);
        assert!(!a.saturated);

        let same = aggregate_frame(1, &[feature(4.0, 1.5, 0.3); 5]);
        assert_relative_eq!(same.sigma_bar, 2.0);
        assert_relative_eq!(same.residual_bar, 1.5);
        assert_relative_eq!(same.kappa_bar, 0.3);
    }

    #[test]
    fn empty_frame_is_saturated() {
        let a = aggregate_frame::<f64>(3, &[]);
        assert!(a.saturated);
        assert_eq!(a.sigma_bar, f64::INFINITY);
        assert_eq!(a.feature_count, 0);
    }

    #[test]
    fn zscore_examples() {
        let mut n = Normalizer::new(75, 1);
        for _ in 0..20 {
            n.push(5.0);
        }
        assert_eq!(n.zscore_update(5.0), 0.0);

        let mut n = Normalizer::new(75, 1);
        for x in [1.0, 2.0, 3.0] {
            n.push(x);
        }
        assert_relative_eq!(n.zscore_update(3.0), 1.0 / (2.0f64 / 3.0).sqrt(), epsilon = 1e-12);
        assert_relative_eq!(n.zscore_update(3.0), (3.0 - 2.25) / (0.6875f64).sqrt(), epsilon = 1e-12);
    }

    #[test]
    fn zscore_warmup_and_capacity() {
        let mut n = Normalizer::new(4, 3);
        assert_eq!(n.zscore_update(1.0), 0.0);
        assert_eq!(n.zscore_update(2.0), 0.0);
        assert_eq!(n.zscore_update(9.0), 0.0);
        assert!(n.zscore_update(9.0) > 0.0);
        for _ in 0..10 {
            n.push(1.0);
        }
        assert_eq!(n.len(), 4);
        assert_eq!(n.stats(), (1.0, 0.0));
    }

    #[test]
    fn clamp_examples() {
        assert_eq!(clamp3(4.2), 3.0);
        assert_eq!(clamp3(-7.0), -3.0);
        assert_eq!(clamp3(1.5), 1.5);
    }

    #[test]
    fn fuse_examples() {
        assert_eq!(fuse_risk(0.0, 0.0, 0.0, 1.0), 0.0);
        assert_relative_eq!(fuse_risk(1.0, 1.0, 1.0, 1.0), 2.0 + 2.0f64.ln(), epsilon = 1e-12);
        assert_relative_eq!(risk_components(0.0, 0.0, -2.0).conditioning, -(3.0f64.ln()), epsilon = 1e-12);
        assert_relative_eq!(fuse_risk(0.0, 0.0, -2.0, 1.0), -(3.0f64.ln()), epsilon = 1e-12);
    }

    #[test]
    fn smoothing_examples() {
        let mut s = Smoother::new(7);
        for _ in 0..10 {
            let (smooth, rate) = s.push(2.0, 0.05);
            assert_eq!(smooth, 2.0);
            assert_eq!(rate, 0.0);
        }

        let mut s = Smoother::new(7);
        let mut last = (0.0, 0.0);
        for k in 0..20 {
            last = s.push(0.1 * k as f64, 0.05);
        }
        assert_relative_eq!(last.1, 2.0, epsilon = 1e-9);

        let mut s = Smoother::new(7);
        let h = 5.0;
        let mut peak = 0.0f64;
        for k in 0..20 {
            let raw = if k == 10 { h } else { 0.0 };
            peak = peak.max(s.push(raw, 0.05).0);
        }
        assert!(peak <= h / 7.0 + 1e-12);
    }

    #[test]
    fn first_derivative_is_zero() {
        let mut s = Smoother::new(7);
        assert_eq!(s.push(3.0, 0.05), (3.0, 0.0));
    }

    #[test]
    fn offline_average_matches_online_bits() {
        let raw: Vec<f64> = (0..200).map(|k| ((k as f64) * 0.37).sin() * 3.1 + 0.01 * k as f64).collect();
        let mut s = Smoother::new(7);
        let online: Vec<f64> = raw.iter().map(|r| s.push(*r, 0.05).0).collect();
        let offline = moving_average(&raw, 7);
        for (a, b) in online.iter().zip(&offline) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn trend_examples() {
        let run = |rates: &[f64], c| {
            let mut t = TrendDetector::new(c, 0.0);
            rates.iter().map(|r| t.push(*r)).last().unwrap()
        };
        assert!(run(&[1.0, 1.0, 1.0, 1.0], 4));
        assert!(!run(&[1.0, 1.0, -1.0, 1.0], 4));
        let mut t = TrendDetector::new(2, 0.0);
        for k in 0..50 {
            assert!(!t.push(if k % 2 == 0 { 1.0 } else { -1.0 }));
        }
    }

    #[test]
    fn threshold_examples() {
        let samples: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(calibrate_threshold(&samples).unwrap(), 95.0);
        assert_eq!(calibrate_threshold(&[1.25; 30]).unwrap(), 1.25);
        assert!(matches!(calibrate_threshold(&[1.0; 19]), Err(Error::InsufficientCalibrationData(19))));
    }

    #[test]
    fn iso_examples() {
        assert_eq!(risk_to_iso(4.0, 0.0), 0.0);
        assert_eq!(risk_to_iso(4.0, 1.0), 4.0);
        assert_eq!(risk_to_iso(2.5, 3.0), 7.5);
    }

    #[test]
    fn saturated_frame_has_max_risk_and_skips_normalizer() {
        let mut m = Monitor::<f64>::new(MonitorConfig::default(), Some(1.0)).unwrap();
        let e = m.process_features(20, 1.0, FrameStatus::Tracking, &[], 0.0);
        assert!(e.saturated);
        assert_eq!(e.raw, risk_bound(1.0));
        assert_eq!(e.margin, Some(f64::INFINITY));
        assert!(m.sigma.is_empty());
        let lost = m.process_features(21, 1.05, FrameStatus::Lost, &[], 0.0);
        assert!(lost.saturated);
    }

    #[test]
    fn initializing_frame_is_neutral() {
        let mut m = Monitor::<f64>::new(MonitorConfig::default(), None).unwrap();
        let e = m.process_features(0, 0.0, FrameStatus::Initializing, &[], 0.0);
        assert!(!e.saturated);
        assert_eq!(e.raw, 0.0);
        assert_eq!(e.margin, None);
        assert!(!e.calibrating);
    }

    #[test]
    fn monitor_responds_to_residual_jump() {
        let mut m = Monitor::<f64>::new(MonitorConfig::default(), Some(1.0)).unwrap();
        let mut last = None;
        for k in 0..60u64 {
            let wiggle = 0.01 * ((k as f64) * 1.3).sin();
            let residual = if k >= 57 { 3.0 } else { 1.0 + wiggle };
            let ind = FrameIndicators {
                frame_id: k,
                sigma_bar: 1.0 + wiggle,
                residual_bar: residual,
                kappa_bar: 0.2 + wiggle,
                feature_count: 100,
                outlier_ratio: 0.0,
                saturated: false,
            };
            last = Some(m.process_indicators(ind, k as f64 * 0.05, FrameStatus::Tracking));
        }
        let e = last.unwrap();
        assert!(e.raw > 2.0);
        assert!(e.components.residual > 2.9);
        assert!(e.warning());
    }

    #[test]
    fn generic_over_f32() {
        let mut m = Monitor::<f32>::new(MonitorConfig::default(), Some(1.0)).unwrap();
        let input = FeatureInput {
            feature_id: 1,
            residual: Vector2::new(0.3f32, 0.4),
            jacobian: Matrix2x3::new(100.0, 0.0, -10.0, 0.0, 100.0, -5.0),
            information: Matrix3::identity() * 1e4,
        };
        let e = m.process_features(0, 0.0, FrameStatus::Tracking, &[input], 0.0);
        assert_eq!(e.indicators.feature_count, 1);
        assert!((e.indicators.residual_bar - 0.5).abs() < 1e-6);
        assert!(e.indicators.sigma_bar > 0.0);
    }

    #[test]
    fn config_validation() {
        assert!(MonitorConfig { lambda: -1.0, ..Default::default() }.validate().is_err());
        assert!(MonitorConfig { smoothing_window: 0, ..Default::default() }.validate().is_err());
        assert!(Monitor::<f64>::new(MonitorConfig { warmup_samples: 100, ..Default::default() }, None).is_err());
    }

    proptest! {
        #[test]
        fn zscore_translation_invariant(
            history in proptest::collection::vec(-50.0f64..50.0, 12..60),
            x in -50.0f64..50.0,
            shift in -1e3f64..1e3,
        ) {
            let mut a = Normalizer::new(75, 10);
            let mut b = Normalizer::new(75, 10);
            for h in &history {
                a.push(*h);
                b.push(*h + shift);
            }
            let za = a.zscore_update(x);
            let zb = b.zscore_update(x + shift);
            prop_assert!((za - zb).abs() <= 1e-6 * (1.0 + za.abs()));
        }

        #[test]
        fn clamp_stays_in_bounds(x in proptest::num::f64::NORMAL) {
            let c = clamp3(x);
            prop_assert!((-3.0..=3.0).contains(&c));
        }

        #[test]
        fn fused_risk_is_bounded(s in -1e6f64..1e6, r in -1e6f64..1e6, k in -1e6f64..1e6, lambda in 0.0f64..5.0) {
            let v = fuse_risk(s, r, k, lambda);
            let b = risk_bound(lambda);
            prop_assert!(v.abs() <= b + 1e-12);
        }

        #[test]
        fn threshold_moves_at_most_one_rank(
            mut samples in proptest::collection::vec(0.0f64..100.0, 20..200),
            extra in 0.0f64..1.0,
        ) {
            let before = calibrate_threshold(&samples).unwrap();
            let mut sorted = samples.clone();
            sorted.sort_by(f64::total_cmp);
            samples.push(extra * before);
            let after = calibrate_threshold(&samples).unwrap();
            let rank = sorted.iter().position(|v| *v == before).unwrap();
            let next = sorted.get(rank + 1).copied().unwrap_or(before);
            prop_assert!(after <= next);
        }
    }
}
