//! Synthetic stereo scenes with ground truth.
//!
//! Landmarks are placed by back-projecting random pixels at random depths
//! from random trajectory frames, so every landmark is seen at least once
//! and the landmark density follows the trajectory. Feature tracks persist
//! while their landmark stays visible; new landmarks are recruited in a
//! fixed per-scenario priority order until the per-frame target is met.

use std::collections::HashSet;

use nalgebra::{Isometry3, Matrix3, Point3, Rotation3, Translation3, UnitQuaternion, Vector2, Vector3};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

pub use crate::camera::{project_stereo, StereoIntrinsics, StereoProjection};
use crate::error::{Error, Result};
use crate::rng;

/// Minimum number of observations every generated frame must carry.
pub const MIN_VISIBLE_LANDMARKS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrajectoryKind {
    Line,
    Circle,
    FigureEight,
}

/// Scenario parameters. Every field has a default so config files only
/// need to list what they change.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub seed: u64,
    pub trajectory: TrajectoryKind,
    pub num_frames: usize,
    pub frame_rate_hz: f64,
    pub num_landmarks: usize,
    pub features_per_frame_target: usize,
    /// Meters.
    pub stereo_baseline: f64,
    /// Pixels.
    pub focal_length: f64,
    pub image_width: u32,
    pub image_height: u32,
    /// Clean-condition measurement noise std in pixels.
    pub measurement_noise_px: f64,
    /// Circle radius; also sets the path speed of the other trajectories.
    pub trajectory_radius: f64,
    pub depth_min: f64,
    pub depth_max: f64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            trajectory: TrajectoryKind::Circle,
            num_frames: 200,
            frame_rate_hz: 20.0,
            num_landmarks: 1500,
            features_per_frame_target: 200,
            stereo_baseline: 0.2,
            focal_length: 450.0,
            image_width: 752,
            image_height: 480,
            measurement_noise_px: 1.0,
            trajectory_radius: 5.0,
            depth_min: 2.0,
            depth_max: 10.0,
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(what.to_string()));
        if self.num_frames < 1 || self.num_landmarks < 1 || self.features_per_frame_target < 1 {
            return bad("counts must be at least 1");
        }
        if self.image_width < 1 || self.image_height < 1 {
            return bad("image size must be at least 1x1");
        }
        if !(self.stereo_baseline > 0.0) {
            return bad("stereo_baseline must be positive");
        }
        if !(self.focal_length > 0.0) {
            return bad("focal_length must be positive");
        }
        if !(self.frame_rate_hz > 0.0) {
            return bad("frame_rate_hz must be positive");
        }
        if !(self.measurement_noise_px >= 0.0) {
            return bad("measurement_noise_px must be non-negative");
        }
        if !(self.trajectory_radius > 0.0) {
            return bad("trajectory_radius must be positive");
        }
        if !(self.depth_min > 0.0 && self.depth_max > self.depth_min) {
            return bad("depth range must satisfy 0 < depth_min < depth_max");
        }
        Ok(())
    }

    pub fn intrinsics(&self) -> StereoIntrinsics<f64> {
        let width = f64::from(self.image_width);
        let height = f64::from(self.image_height);
        StereoIntrinsics {
            focal: self.focal_length,
            cu: width / 2.0,
            cv: height / 2.0,
            baseline: self.stereo_baseline,
            width,
            height,
        }
    }

    pub fn frame_interval(&self) -> f64 {
        1.0 / self.frame_rate_hz
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    /// Camera-to-world pose per frame.
    pub poses: Vec<Isometry3<f64>>,
    /// Landmark positions indexed by landmark id.
    pub landmarks: Vec<Point3<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub feature_id: u64,
    pub landmark_id: u64,
    /// Left-image pixel.
    pub pixel: [f64; 2],
    pub disparity: f64,
    #[serde(default)]
    pub is_outlier_injected: bool,
}

impl Observation {
    pub fn pixel(&self) -> Vector2<f64> {
        Vector2::new(self.pixel[0], self.pixel[1])
    }

    /// Measurement vector `(u, v, d)`.
    pub fn measurement(&self) -> Vector3<f64> {
        Vector3::new(self.pixel[0], self.pixel[1], self.disparity)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameObservations {
    pub frame_id: u64,
    pub timestamp: f64,
    pub observations: Vec<Observation>,
}

#[derive(Debug, Clone)]
pub struct Scenario {
    pub config: ScenarioConfig,
    pub intrinsics: StereoIntrinsics<f64>,
    pub truth: GroundTruth,
    pub frames: Vec<FrameObservations>,
}

/// Position and velocity of the trajectory at time `t`.
fn trajectory_state(config: &ScenarioConfig, t: f64) -> (Vector3<f64>, Vector3<f64>) {
    let duration = config.num_frames as f64 / config.frame_rate_hz;
    let r = config.trajectory_radius;
    let w = std::f64::consts::TAU / duration;
    match config.trajectory {
        TrajectoryKind::Line => (Vector3::new(r * w * t, 0.0, 0.0), Vector3::new(r * w, 0.0, 0.0)),
        TrajectoryKind::Circle => {
            let (s, c) = (w * t).sin_cos();
            (Vector3::new(r * c, r * s, 0.0), Vector3::new(-r * w * s, r * w * c, 0.0))
        }
        TrajectoryKind::FigureEight => {
            let (s, c) = (w * t).sin_cos();
            let (s2, c2) = (2.0 * w * t).sin_cos();
            (
                Vector3::new(r * s, 0.5 * r * s2, 0.0),
                Vector3::new(r * w * c, r * w * c2, 0.0),
            )
        }
    }
}

/// Camera looks horizontally to the right of the direction of travel.
fn pose_at(config: &ScenarioConfig, t: f64) -> Isometry3<f64> {
    let (position, velocity) = trajectory_state(config, t);
    let up = Vector3::z();
    let forward = velocity.cross(&up).normalize();
    let down = -up;
    let right = down.cross(&forward);
    let rotation = Rotation3::from_matrix_unchecked(Matrix3::from_columns(&[right, down, forward]));
    Isometry3::from_parts(Translation3::from(position), UnitQuaternion::from_rotation_matrix(&rotation))
}

/// Generates ground truth and noisy stereo observations for `config`.
pub fn generate_scenario(config: &ScenarioConfig) -> Result<Scenario> {
    config.validate()?;
    let intr = config.intrinsics();
    let dt = config.frame_interval();
    let poses: Vec<_> = (0..config.num_frames).map(|k| pose_at(config, k as f64 * dt)).collect();

    let landmarks: Vec<Point3<f64>> = (0..config.num_landmarks as u64)
        .map(|j| {
            let mut rng = rng::stream(config.seed, rng::DOMAIN_LANDMARKS, j, 0);
            let k = rng.random_range(0..config.num_frames);
            let u = rng.random_range(0.0..intr.width);
            let v = rng.random_range(0.0..intr.height);
            let depth = rng.random_range(config.depth_min..config.depth_max);
            let ray = Vector3::new((u - intr.cu) / intr.focal, (v - intr.cv) / intr.focal, 1.0);
            poses[k] * Point3::from(ray * depth)
        })
        .collect();

    let mut priority: Vec<u64> = (0..config.num_landmarks as u64).collect();
    priority.sort_by_key(|&j| rng::stream_key(config.seed, rng::DOMAIN_SELECTION, j, 0));

    let mut tracked: HashSet<u64> = HashSet::new();
    let mut frames = Vec::with_capacity(config.num_frames);
    for (k, pose) in poses.iter().enumerate() {
        let frame_id = k as u64;
        let visible: Vec<Option<StereoProjection<f64>>> = landmarks
            .iter()
            .map(|x| project_stereo(pose, x, &intr).ok().filter(|p| intr.contains(&p.pixel)))
            .collect();

        let mut selected: Vec<u64> = tracked
            .iter()
            .copied()
            .filter(|&j| visible[j as usize].is_some())
            .collect();
        selected.sort_unstable();
        let mut chosen: HashSet<u64> = selected.iter().copied().collect();
        for &j in &priority {
            if selected.len() >= config.features_per_frame_target {
                break;
            }
            if visible[j as usize].is_some() && !chosen.contains(&j) {
                selected.push(j);
                chosen.insert(j);
            }
        }
        selected.sort_unstable();

        let mut observations = Vec::with_capacity(selected.len());
        for &j in &selected {
            let clean = visible[j as usize].expect("selected landmarks are visible");
            let mut rng = rng::stream(config.seed, rng::DOMAIN_OBSERVATION, frame_id, j);
            let sigma = config.measurement_noise_px;
            let nu: f64 = rng.sample(StandardNormal);
            let nv: f64 = rng.sample(StandardNormal);
            let nd: f64 = rng.sample(StandardNormal);
            let pixel = Vector2::new(clean.pixel.x + sigma * nu, clean.pixel.y + sigma * nv);
            let disparity = clean.disparity + sigma * nd;
            if !intr.contains(&pixel) || disparity <= 0.0 {
                continue;
            }
            observations.push(Observation {
                feature_id: j,
                landmark_id: j,
                pixel: [pixel.x, pixel.y],
                disparity,
                is_outlier_injected: false,
            });
        }
        if observations.len() < MIN_VISIBLE_LANDMARKS {
            return Err(Error::DegenerateGeometry { frame: frame_id, visible: observations.len() });
        }
        tracked = observations.iter().map(|o| o.landmark_id).collect();
        frames.push(FrameObservations { frame_id, timestamp: frame_id as f64 * dt, observations });
    }

    Ok(Scenario { config: config.clone(), intrinsics: intr, truth: GroundTruth { poses, landmarks }, frames })
}
