//! Severity-graded degradations applied to feature observations.
//!
//! There are no images, so each image corruption is modelled by what it
//! does to tracked features: localization noise, dropout, quantization or
//! gross outliers. Every random draw comes from a stream keyed by
//! `(seed, kind, frame, feature)`, so corrupting a sequence never touches
//! the scene's own random streams.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::camera::StereoIntrinsics;
use crate::error::{Error, Result};
use crate::rng;
use crate::scene::{FrameObservations, Observation};

pub const NUM_SEVERITIES: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    AdditiveNoise,
    BlurProxy,
    CompressionProxy,
    Occlusion,
    SaltPepper,
    Speckle,
    Combined,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 7] = [
        CorruptionKind::AdditiveNoise,
        CorruptionKind::BlurProxy,
        CorruptionKind::CompressionProxy,
        CorruptionKind::Occlusion,
        CorruptionKind::SaltPepper,
        CorruptionKind::Speckle,
        CorruptionKind::Combined,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CorruptionKind::AdditiveNoise => "additive_noise",
            CorruptionKind::BlurProxy => "blur_proxy",
            CorruptionKind::CompressionProxy => "compression_proxy",
            CorruptionKind::Occlusion => "occlusion",
            CorruptionKind::SaltPepper => "salt_pepper",
            CorruptionKind::Speckle => "speckle",
            CorruptionKind::Combined => "combined",
        }
    }

    fn stream_domain(self) -> u64 {
        rng::DOMAIN_CORRUPTION + self as u64
    }
}

impl std::fmt::Display for CorruptionKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for CorruptionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        CorruptionKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown corruption kind `{s}`")))
    }
}

/// Effect size per severity level 0..=4.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SeverityTable {
    /// Extra Gaussian std on `(u, v, d)`, px.
    pub additive_noise_px: [f64; NUM_SEVERITIES],
    pub blur_noise_px: [f64; NUM_SEVERITIES],
    /// Fraction of features lost to blur.
    pub blur_dropout: [f64; NUM_SEVERITIES],
    /// Quantization step, px; 0 leaves values untouched.
    pub compression_step_px: [f64; NUM_SEVERITIES],
    /// Image area covered by the occluder.
    pub occlusion_coverage: [f64; NUM_SEVERITIES],
    /// Probability of replacing a measurement with a random in-image pixel.
    pub salt_pepper_rate: [f64; NUM_SEVERITIES],
    /// Std of multiplicative noise relative to the measured value.
    pub speckle_factor: [f64; NUM_SEVERITIES],
}

impl Default for SeverityTable {
    fn default() -> Self {
        Self {
            additive_noise_px: [0.0, 0.5, 1.0, 2.0, 4.0],
            blur_noise_px: [0.0, 0.3, 0.6, 1.2, 2.4],
            blur_dropout: [0.0, 0.05, 0.1, 0.2, 0.3],
            compression_step_px: [0.0, 0.25, 0.5, 1.0, 2.0],
            occlusion_coverage: [0.0, 0.10, 0.25, 0.50, 0.75],
            salt_pepper_rate: [0.0, 0.01, 0.03, 0.08, 0.15],
            speckle_factor: [0.0, 0.002, 0.005, 0.01, 0.02],
        }
    }
}

impl SeverityTable {
    /// Default table with a full-frame occluder at the top level, used to
    /// provoke loss of feature support.
    pub fn hard_collapse() -> Self {
        Self { occlusion_coverage: [0.0, 0.10, 0.25, 0.50, 1.0], ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let fractions = [&self.blur_dropout, &self.occlusion_coverage, &self.salt_pepper_rate];
        let scales = [&self.additive_noise_px, &self.blur_noise_px, &self.compression_step_px, &self.speckle_factor];
        for row in fractions {
            if row.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::Config("severity fractions must lie in [0, 1]".into()));
            }
        }
        for row in fractions.into_iter().chain(scales) {
            if row[0] != 0.0 || row.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                return Err(Error::Config("severity level 0 must be 0 and all levels finite and non-negative".into()));
            }
        }
        Ok(())
    }
}

/// Half-open frame interval `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameWindow {
    pub start: u64,
    pub end: u64,
}

impl FrameWindow {
    pub fn contains(&self, frame_id: u64) -> bool {
        (self.start..self.end).contains(&frame_id)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    pub severity: u8,
    /// Frames affected; the whole sequence when absent.
    #[serde(default)]
    pub window: Option<FrameWindow>,
    pub seed: u64,
    /// Effect strength grows linearly over this many frames from the start
    /// of the window. 0 applies full strength at once.
    #[serde(default)]
    pub ramp_frames: u64,
}

impl CorruptionSpec {
    pub fn clean(seed: u64) -> Self {
        Self { kind: CorruptionKind::AdditiveNoise, severity: 0, window: None, seed, ramp_frames: 0 }
    }

    pub fn validate(&self, num_frames: usize) -> Result<()> {
        if self.severity as usize >= NUM_SEVERITIES {
            return Err(Error::Config(format!("severity {} outside 0..=4", self.severity)));
        }
        if let Some(w) = self.window {
            if w.start >= w.end || w.end > num_frames as u64 {
                return Err(Error::Config(format!("window {}..{} outside 0..{num_frames}", w.start, w.end)));
            }
        }
        Ok(())
    }

    pub fn is_identity(&self) -> bool {
        self.severity == 0
    }

    /// Effect strength in `[0, 1]` at `frame_id`.
    pub fn strength(&self, frame_id: u64) -> f64 {
        let start = match self.window {
            Some(w) if !w.contains(frame_id) => return 0.0,
            Some(w) => w.start,
            None => 0,
        };
        if self.ramp_frames == 0 {
            1.0
        } else {
            ((frame_id - start + 1) as f64 / self.ramp_frames as f64).min(1.0)
        }
    }

    /// Short label such as `occlusion-s3`.
    pub fn label(&self) -> String {
        format!("{}-s{}", self.kind, self.severity)
    }
}

/// Axis-aligned occluder with a fixed centre, scaled by coverage. It wraps
/// around the image borders, so over random centres every pixel is covered
/// with probability equal to the coverage.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Occluder {
    pub center: [f64; 2],
    pub width: f64,
    pub height: f64,
    image: [f64; 2],
}

impl Occluder {
    /// Random centre per run.
    pub fn for_run(seed: u64, coverage: f64, intr: &StereoIntrinsics<f64>) -> Self {
        let scale = coverage.clamp(0.0, 1.0).sqrt();
        let mut rng = rng::stream(seed, CorruptionKind::Occlusion.stream_domain(), u64::MAX, 0);
        let cx = rng.random::<f64>() * intr.width;
        let cy = rng.random::<f64>() * intr.height;
        Self { center: [cx, cy], width: intr.width * scale, height: intr.height * scale, image: [intr.width, intr.height] }
    }

    /// Same centre, area reduced by `strength`.
    pub fn scaled(&self, strength: f64) -> Self {
        let s = strength.clamp(0.0, 1.0).sqrt();
        Self { width: self.width * s, height: self.height * s, ..*self }
    }

    pub fn covers(&self, pixel: [f64; 2]) -> bool {
        let inside = |x: f64, c: f64, extent: f64, size: f64| {
            if extent >= size {
                return true;
            }
            let d = (x - c).rem_euclid(size);
            d.min(size - d) <= extent / 2.0
        };
        inside(pixel[0], self.center[0], self.width, self.image[0])
            && inside(pixel[1], self.center[1], self.height, self.image[1])
    }
}

fn in_image(o: &Observation, intr: &StereoIntrinsics<f64>) -> bool {
    o.pixel[0] >= 0.0 && o.pixel[0] < intr.width && o.pixel[1] >= 0.0 && o.pixel[1] < intr.height && o.disparity > 0.0
}

fn add_noise(o: &mut Observation, std: f64, rng: &mut impl Rng) {
    if std > 0.0 {
        let n = Normal::new(0.0, std).expect("finite std");
        o.pixel[0] += n.sample(rng);
        o.pixel[1] += n.sample(rng);
        o.disparity += n.sample(rng);
    }
}

fn quantize(x: f64, step: f64) -> f64 {
    if step > 0.0 {
        (x / step).round() * step
    } else {
        x
    }
}

/// Corrupts a sequence. Severity 0 returns the input unchanged.
pub fn apply(
    spec: &CorruptionSpec,
    table: &SeverityTable,
    intr: &StereoIntrinsics<f64>,
    frames: &[FrameObservations],
) -> Vec<FrameObservations> {
    if spec.is_identity() {
        return frames.to_vec();
    }
    let level = spec.severity as usize;
    let occluder = Occluder::for_run(spec.seed, table.occlusion_coverage[level], intr);
    frames
        .iter()
        .map(|frame| {
            let strength = spec.strength(frame.frame_id);
            if strength == 0.0 {
                return frame.clone();
            }
            let occluder = occluder.scaled(strength);
            let observations = frame
                .observations
                .iter()
                .filter_map(|o| corrupt_one(spec, table, intr, &occluder, frame.frame_id, strength, o))
                .collect();
            FrameObservations { observations, ..frame.clone() }
        })
        .collect()
}

fn corrupt_one(
    spec: &CorruptionSpec,
    table: &SeverityTable,
    intr: &StereoIntrinsics<f64>,
    occluder: &Occluder,
    frame_id: u64,
    strength: f64,
    obs: &Observation,
) -> Option<Observation> {
    let level = spec.severity as usize;
    let mut rng = rng::stream(spec.seed, spec.kind.stream_domain(), frame_id, obs.feature_id);
    let mut o = obs.clone();
    match spec.kind {
        CorruptionKind::AdditiveNoise => add_noise(&mut o, strength * table.additive_noise_px[level], &mut rng),
        CorruptionKind::BlurProxy => {
            if rng.random::<f64>() < strength * table.blur_dropout[level] {
                return None;
            }
            add_noise(&mut o, strength * table.blur_noise_px[level], &mut rng);
        }
        CorruptionKind::CompressionProxy => {
            let step = strength * table.compression_step_px[level];
            o.pixel = [quantize(o.pixel[0], step), quantize(o.pixel[1], step)];
            o.disparity = quantize(o.disparity, step);
        }
        CorruptionKind::Occlusion => {
            if occluder.covers(o.pixel) {
                return None;
            }
        }
        CorruptionKind::SaltPepper => {
            if rng.random::<f64>() < strength * table.salt_pepper_rate[level] {
                o.pixel = [rng.random::<f64>() * intr.width, rng.random::<f64>() * intr.height];
                o.is_outlier_injected = true;
            }
        }
        CorruptionKind::Speckle => {
            let f = strength * table.speckle_factor[level];
            if f > 0.0 {
                let n = Normal::new(0.0, f).expect("finite factor");
                o.pixel[0] *= 1.0 + n.sample(&mut rng);
                o.pixel[1] *= 1.0 + n.sample(&mut rng);
                o.disparity *= 1.0 + n.sample(&mut rng);
            }
        }
        CorruptionKind::Combined => {
            if occluder.covers(o.pixel) {
                return None;
            }
            add_noise(&mut o, strength * table.additive_noise_px[level], &mut rng);
        }
    }
    in_image(&o, intr).then_some(o)
}

/// One entry of an experiment batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSpec {
    /// Seed of the base scenario.
    pub scenario_seed: u64,
    pub corruption: CorruptionSpec,
}

impl RunSpec {
    /// Unique, filesystem-safe tag.
    pub fn tag(&self) -> String {
        format!("{}-seed{}", self.corruption.label(), self.scenario_seed)
    }
}

/// Cartesian product kinds × severities × seeds, in that nesting order.
/// Each seed drives both the scene and the corruption streams.
pub fn corruption_grid(
    kinds: &[CorruptionKind],
    severities: &[u8],
    seeds: &[u64],
    window: Option<FrameWindow>,
    ramp_frames: u64,
) -> Vec<RunSpec> {
    let mut runs = Vec::with_capacity(kinds.len() * severities.len() * seeds.len());
    for &kind in kinds {
        for &severity in severities {
            for &seed in seeds {
                runs.push(RunSpec {
                    scenario_seed: seed,
                    corruption: CorruptionSpec { kind, severity, window, seed, ramp_frames },
                });
            }
        }
    }
    runs
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{generate_scenario, ScenarioConfig};
    use std::collections::HashSet;

    fn scenario() -> crate::scene::Scenario {
        generate_scenario(&ScenarioConfig::default()).unwrap()
    }

    fn spec(kind: CorruptionKind, severity: u8) -> CorruptionSpec {
        CorruptionSpec { kind, severity, window: None, seed: 11, ramp_frames: 0 }
    }

    fn count(frames: &[FrameObservations]) -> usize {
        frames.iter().map(|f| f.observations.len()).sum()
    }

    #[test]
    fn severity_zero_is_identity() {
        let s = scenario();
        for kind in CorruptionKind::ALL {
            let out = apply(&spec(kind, 0), &SeverityTable::default(), &s.intrinsics, &s.frames);
            assert_eq!(serde_json::to_string(&out).unwrap(), serde_json::to_string(&s.frames).unwrap());
        }
    }

    #[test]
    fn occlusion_level_three_keeps_half() {
        let s = scenario();
        let mut fractions = Vec::new();
        for seed in 0..40 {
            let spec = CorruptionSpec { seed, ..spec(CorruptionKind::Occlusion, 3) };
            let out = apply(&spec, &SeverityTable::default(), &s.intrinsics, &s.frames);
            fractions.push(count(&out) as f64 / count(&s.frames) as f64);
        }
        let mean = fractions.iter().sum::<f64>() / fractions.len() as f64;
        assert!((mean - 0.5).abs() <= 0.05, "surviving fraction {mean}");
    }

    #[test]
    fn salt_pepper_rate_matches_table() {
        let s = scenario();
        let out = apply(&spec(CorruptionKind::SaltPepper, 4), &SeverityTable::default(), &s.intrinsics, &s.frames);
        let total = count(&s.frames);
        assert!(total >= 10_000);
        let outliers = out.iter().flat_map(|f| &f.observations).filter(|o| o.is_outlier_injected).count();
        let rate = outliers as f64 / total as f64;
        assert!((0.12..=0.18).contains(&rate), "rate {rate}");
    }

    #[test]
    fn deterministic_and_independent_of_scene() {
        let s = scenario();
        let sp = spec(CorruptionKind::BlurProxy, 3);
        let a = apply(&sp, &SeverityTable::default(), &s.intrinsics, &s.frames);
        let b = apply(&sp, &SeverityTable::default(), &s.intrinsics, &s.frames);
        assert_eq!(a, b);
        let other = apply(&CorruptionSpec { seed: 12, ..sp }, &SeverityTable::default(), &s.intrinsics, &s.frames);
        assert_ne!(a, other);
        let again = scenario();
        assert_eq!(again.frames, s.frames);
    }

    #[test]
    fn window_limits_effect() {
        let s = scenario();
        let sp = CorruptionSpec { window: Some(FrameWindow { start: 50, end: 60 }), ..spec(CorruptionKind::AdditiveNoise, 4) };
        let out = apply(&sp, &SeverityTable::default(), &s.intrinsics, &s.frames);
        for (a, b) in out.iter().zip(&s.frames) {
            assert_eq!(a == b, !(50..60).contains(&a.frame_id), "frame {}", a.frame_id);
        }
    }

    #[test]
    fn ramp_grows_strength() {
        let sp = CorruptionSpec { window: Some(FrameWindow { start: 100, end: 150 }), ramp_frames: 20, ..spec(CorruptionKind::Occlusion, 4) };
        assert_eq!(sp.strength(99), 0.0);
        assert_eq!(sp.strength(100), 0.05);
        assert_eq!(sp.strength(109), 0.5);
        assert_eq!(sp.strength(130), 1.0);
        assert_eq!(sp.strength(150), 0.0);
    }

    #[test]
    fn hard_collapse_removes_everything() {
        let s = scenario();
        let sp = spec(CorruptionKind::Occlusion, 4);
        let out = apply(&sp, &SeverityTable::hard_collapse(), &s.intrinsics, &s.frames);
        assert_eq!(count(&out), 0);
    }

    #[test]
    fn compression_quantizes() {
        let s = scenario();
        let out = apply(&spec(CorruptionKind::CompressionProxy, 4), &SeverityTable::default(), &s.intrinsics, &s.frames);
        for o in out.iter().flat_map(|f| &f.observations) {
            assert_eq!(o.pixel[0] % 2.0, 0.0);
            assert_eq!(o.disparity % 2.0, 0.0);
        }
    }

    #[test]
    fn effect_sizes_increase_with_severity() {
        let t = SeverityTable::default();
        assert!(t.additive_noise_px.windows(2).all(|w| w[0] < w[1]));
        assert!(t.occlusion_coverage.windows(2).all(|w| w[0] < w[1]));
        let s = scenario();
        let mut kept = Vec::new();
        for level in 0..5 {
            let out = apply(&spec(CorruptionKind::Occlusion, level), &t, &s.intrinsics, &s.frames);
            kept.push(count(&out));
        }
        assert!(kept.windows(2).all(|w| w[0] > w[1]), "{kept:?}");
    }

    #[test]
    fn grid_examples() {
        let grid = corruption_grid(&CorruptionKind::ALL, &[0, 1, 2, 3, 4], &[1, 2, 3], None, 0);
        assert_eq!(grid.len(), 105);
        let tags: HashSet<String> = grid.iter().map(RunSpec::tag).collect();
        assert_eq!(tags.len(), 105);
        assert_eq!(grid, corruption_grid(&CorruptionKind::ALL, &[0, 1, 2, 3, 4], &[1, 2, 3], None, 0));
        let s = scenario();
        for run in grid.iter().filter(|r| r.corruption.severity == 0) {
            let out = apply(&run.corruption, &SeverityTable::default(), &s.intrinsics, &s.frames);
            assert_eq!(out, s.frames);
        }
    }

    #[test]
    fn validation() {
        assert!(spec(CorruptionKind::Speckle, 5).validate(200).is_err());
        let w = CorruptionSpec { window: Some(FrameWindow { start: 150, end: 250 }), ..spec(CorruptionKind::Speckle, 1) };
        assert!(w.validate(200).is_err());
        assert!(w.validate(300).is_ok());
        let mut t = SeverityTable::default();
        assert!(t.validate().is_ok());
        t.salt_pepper_rate[4] = 1.5;
        assert!(t.validate().is_err());
        assert_eq!("salt_pepper".parse::<CorruptionKind>().unwrap(), CorruptionKind::SaltPepper);
        assert!("fog".parse::<CorruptionKind>().is_err());
    }
}
