//! Sliding-window stereo bundle adjustment.
//!
//! The window holds the last `W` poses. The oldest pose is the gauge and is
//! never optimized. A landmark is active while at least two window poses
//! observe it; it is initialized by triangulating its stereo rays from the
//! already-solved poses. Each frame runs at most `max_iterations`
//! Levenberg–Marquardt steps, solved by eliminating landmarks first.

mod normal;
mod triangulate;

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};

use nalgebra::{Isometry3, Matrix2x3, Matrix6, Point3, Vector2, Vector6};
use serde::{Deserialize, Serialize};

pub use normal::{assemble, linearize, retract, solve_damped, Linearization, NormalEquations, Step, Term};
pub use triangulate::{stereo_views, triangulate, View, PARALLAX_CONDITION_LIMIT};

use crate::camera::StereoIntrinsics;
use crate::error::{Error, Result};
use crate::scene::{FrameObservations, Observation};
use crate::uncertainty::{projection_jacobian, BlockHessian};

/// Triangulated points closer than this to any observing camera are dropped.
pub const MIN_TRIANGULATED_DEPTH: f64 = 0.1;

const ALIGN_ITERATIONS: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendConfig {
    pub window_size: usize,
    pub max_iterations: usize,
    pub initial_lambda: f64,
    /// Nominal measurement noise used for the normal matrix.
    pub measurement_noise_px: f64,
    /// Rescale the emitted normal matrix by the a-posteriori noise estimate.
    pub posterior_noise: bool,
    /// Fewer tracked features than this marks the frame as lost.
    pub min_tracked_features: usize,
    /// Consecutive lost frames tolerated before reporting divergence.
    pub max_lost_frames: usize,
    /// Per-frame residual gate: `max(gate_min_px, gate_factor · median)`.
    pub gate_min_px: f64,
    pub gate_factor: f64,
    /// Consecutive damping escalations before reporting divergence.
    pub max_escalations: usize,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            window_size: 8,
            max_iterations: 3,
            initial_lambda: 1e-4,
            measurement_noise_px: 1.0,
            posterior_noise: true,
            min_tracked_features: 10,
            max_lost_frames: 3,
            gate_min_px: 8.0,
            gate_factor: 4.0,
            max_escalations: 5,
        }
    }
}

impl BackendConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window_size < 2 {
            return Err(Error::Config("window_size must be at least 2".into()));
        }
        if !(self.initial_lambda >= 0.0) || !(self.measurement_noise_px > 0.0) {
            return Err(Error::Config("initial_lambda must be >= 0 and measurement_noise_px > 0".into()));
        }
        if self.max_escalations < 1 {
            return Err(Error::Config("max_escalations must be at least 1".into()));
        }
        Ok(())
    }
}

/// One frame inside the window.
#[derive(Debug, Clone)]
pub struct WindowFrame {
    pub frame_id: u64,
    pub timestamp: f64,
    pub pose: Isometry3<f64>,
    pub observations: Vec<Observation>,
    /// Gate decision per observation.
    pub inlier: Vec<bool>,
}

#[derive(Debug, Clone, Default)]
pub struct WindowState {
    pub frames: VecDeque<WindowFrame>,
    pub landmarks: BTreeMap<u64, Point3<f64>>,
}

impl WindowState {
    /// Index of the anchored pose.
    pub const FIXED_GAUGE: usize = 0;

    pub fn poses(&self) -> impl Iterator<Item = (u64, &Isometry3<f64>)> {
        self.frames.iter().map(|f| (f.frame_id, &f.pose))
    }

    pub fn frame_ids(&self) -> Vec<u64> {
        self.frames.iter().map(|f| f.frame_id).collect()
    }

    /// Number of window frames observing each landmark.
    pub fn observer_counts(&self) -> HashMap<u64, usize> {
        let mut counts = HashMap::new();
        for frame in &self.frames {
            for o in &frame.observations {
                *counts.entry(o.landmark_id).or_insert(0) += 1;
            }
        }
        counts
    }

    /// Drops the oldest frame once the window is full, appends `frame` with
    /// a constant-position pose prediction and retires landmarks left with
    /// fewer than two observers.
    pub fn slide(&mut self, frame: &FrameObservations, window_size: usize) -> Result<()> {
        if frame.observations.is_empty() {
            return Err(Error::Config(format!("frame {} has no observations", frame.frame_id)));
        }
        let predicted = self.frames.back().map(|f| f.pose).unwrap_or_else(Isometry3::identity);
        while self.frames.len() >= window_size {
            self.frames.pop_front();
        }
        self.frames.push_back(WindowFrame {
            frame_id: frame.frame_id,
            timestamp: frame.timestamp,
            pose: predicted,
            observations: frame.observations.clone(),
            inlier: vec![true; frame.observations.len()],
        });
        if self.frames.len() < 2 {
            return Err(Error::WindowUnderflow(self.frames.len()));
        }
        let counts = self.observer_counts();
        self.landmarks.retain(|id, _| counts.get(id).copied().unwrap_or(0) >= 2);
        Ok(())
    }
}

/// Tracking status reported with every frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrackingState {
    /// First frame: no landmark is observed twice yet.
    Initializing,
    Tracking,
    /// Too few tracked features; the pose is the prediction.
    Lost,
}

/// Per-measurement quantities handed to the risk engine.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObservationTerm {
    pub frame_id: u64,
    pub feature_id: u64,
    pub landmark_id: u64,
    /// Left-image reprojection residual, measured minus predicted (px).
    pub residual: Vector2<f64>,
    /// Left-image projection Jacobian with respect to the landmark.
    pub jacobian: Matrix2x3<f64>,
}

/// Immutable snapshot of one solved frame.
#[derive(Debug, Clone)]
pub struct SolveOutput {
    pub frame_id: u64,
    pub timestamp: f64,
    pub state: TrackingState,
    /// One entry per measurement used in the final solve.
    pub terms: Vec<ObservationTerm>,
    pub hessian: BlockHessian<f64>,
    pub pose_estimates: Vec<(u64, Isometry3<f64>)>,
    pub iterations: usize,
    pub converged: bool,
    pub lambda: f64,
    /// Noise std used for the emitted normal matrix.
    pub noise_sigma: f64,
    /// Observations of the current frame rejected by the gate.
    pub outliers: usize,
    /// Observations of the current frame.
    pub observations: usize,
}

impl SolveOutput {
    pub fn current_terms(&self) -> impl Iterator<Item = &ObservationTerm> {
        self.terms.iter().filter(move |t| t.frame_id == self.frame_id)
    }

    pub fn current_pose(&self) -> Option<&Isometry3<f64>> {
        self.pose_estimates.iter().find(|(id, _)| *id == self.frame_id).map(|(_, p)| p)
    }

    /// `diag((H_pp + λI)⁻¹)`, a per-parameter pose variance proxy.
    pub fn pose_covariance_proxy(&self) -> Option<Vec<f64>> {
        let n = 6 * self.hessian.num_poses;
        let mut m = self.hessian.pose_pose.clone();
        for k in 0..n {
            m[(k, k)] += self.hessian.damping;
        }
        let inv = m.cholesky()?.inverse();
        Some((0..n).map(|k| inv[(k, k)]).collect())
    }
}

/// Outcome of one damped Gauss–Newton step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub cost_before: f64,
    pub cost_after: f64,
    pub step_norm: f64,
    pub lambda: f64,
    pub converged: bool,
}

pub struct SlidingWindowBa {
    config: BackendConfig,
    intr: StereoIntrinsics<f64>,
    window: WindowState,
    lost_frames: usize,
}

impl SlidingWindowBa {
    /// `initial_pose` anchors the gauge at the first frame.
    pub fn new(config: BackendConfig, intr: StereoIntrinsics<f64>, initial_pose: Isometry3<f64>) -> Result<Self> {
        config.validate()?;
        let mut window = WindowState::default();
        window.frames.push_back(WindowFrame {
            frame_id: u64::MAX,
            timestamp: 0.0,
            pose: initial_pose,
            observations: Vec::new(),
            inlier: Vec::new(),
        });
        Ok(Self { config, intr, window, lost_frames: 0 })
    }

    pub fn window(&self) -> &WindowState {
        &self.window
    }

    pub fn window_mut(&mut self) -> &mut WindowState {
        &mut self.window
    }

    pub fn config(&self) -> &BackendConfig {
        &self.config
    }

    fn is_seeded(&self) -> bool {
        self.window.frames.len() == 1 && self.window.frames[0].frame_id == u64::MAX
    }

    /// Consumes one frame of observations.
    pub fn process_frame(&mut self, frame: &FrameObservations) -> Result<SolveOutput> {
        if self.is_seeded() {
            let seed = self.window.frames.pop_front().expect("seed frame");
            self.window.frames.push_back(WindowFrame {
                frame_id: frame.frame_id,
                timestamp: frame.timestamp,
                pose: seed.pose,
                observations: frame.observations.clone(),
                inlier: vec![true; frame.observations.len()],
            });
            return self.output(TrackingState::Initializing, 0, true, self.config.initial_lambda);
        }
        if frame.observations.is_empty() {
            // Nothing to slide in; the window keeps its last state.
            self.mark_lost(frame.frame_id)?;
            let mut out = self.output(TrackingState::Lost, 0, false, self.config.initial_lambda)?;
            out.frame_id = frame.frame_id;
            out.timestamp = frame.timestamp;
            out.observations = 0;
            out.outliers = 0;
            return Ok(out);
        }
        self.window.slide(frame, self.config.window_size)?;
        self.activate_landmarks();

        let tracked = self.current_frame().observations.iter().filter(|o| self.window.landmarks.contains_key(&o.landmark_id)).count();
        if tracked < self.config.min_tracked_features {
            self.mark_lost(frame.frame_id)?;
            return self.output(TrackingState::Lost, 0, false, self.config.initial_lambda);
        }
        self.lost_frames = 0;
        self.align_newest();

        let mut lambda = self.config.initial_lambda;
        let mut iterations = 0;
        let mut converged = false;
        for _ in 0..self.config.max_iterations {
            self.update_gate();
            let report = self.gauss_newton_step(&mut lambda).map_err(|e| match e {
                Error::Diverged { reason, .. } => Error::Diverged { frame: frame.frame_id, reason },
                other => other,
            })?;
            iterations += 1;
            if report.converged {
                converged = true;
                break;
            }
        }
        self.output(TrackingState::Tracking, iterations, converged, lambda)
    }

    fn mark_lost(&mut self, frame_id: u64) -> Result<()> {
        self.lost_frames += 1;
        if self.lost_frames > self.config.max_lost_frames {
            return Err(Error::Diverged { frame: frame_id, reason: format!("tracking lost for {} frames", self.lost_frames) });
        }
        Ok(())
    }

    fn current_frame(&self) -> &WindowFrame {
        self.window.frames.back().expect("window is never empty")
    }

    /// Triangulates landmarks newly observed by two window poses, using the
    /// stereo rays of every frame except the newest.
    fn activate_landmarks(&mut self) {
        let newest = self.window.frames.len() - 1;
        let candidates: BTreeSet<u64> = self.window.frames[newest]
            .observations
            .iter()
            .map(|o| o.landmark_id)
            .filter(|id| !self.window.landmarks.contains_key(id))
            .collect();
        if candidates.is_empty() {
            return;
        }
        let mut views: BTreeMap<u64, Vec<View>> = BTreeMap::new();
        for frame in self.window.frames.iter().take(newest) {
            for (o, &ok) in frame.observations.iter().zip(&frame.inlier) {
                if ok && candidates.contains(&o.landmark_id) {
                    views.entry(o.landmark_id).or_default().extend(stereo_views(&frame.pose, o, &self.intr));
                }
            }
        }
        for (id, rays) in views {
            let Ok(x) = triangulate(&rays, &self.intr) else { continue };
            let in_front = rays.iter().all(|v| (v.pose.inverse() * x).z > MIN_TRIANGULATED_DEPTH);
            if in_front {
                self.window.landmarks.insert(id, x);
            }
        }
    }

    /// Motion-only refinement of the newest pose against the fixed landmarks,
    /// with Huber weights at the gate floor. Run before gating so the gate's
    /// median reflects measurement noise rather than the motion since the
    /// previous frame.
    fn align_newest(&mut self) {
        let huber = self.config.gate_min_px;
        let robust_cost = |pose: &Isometry3<f64>, frame: &WindowFrame| -> Option<(f64, Matrix6<f64>, Vector6<f64>)> {
            let mut cost = 0.0;
            let mut h = Matrix6::zeros();
            let mut g = Vector6::zeros();
            for o in &frame.observations {
                let Some(x) = self.window.landmarks.get(&o.landmark_id) else { continue };
                let lin = linearize(pose, x, &self.intr)?;
                let r = o.measurement() - lin.prediction;
                let n = r.norm();
                let w = if n <= huber { 1.0 } else { huber / n };
                cost += if n <= huber { n * n } else { huber * (2.0 * n - huber) };
                h += lin.d_pose.transpose() * lin.d_pose * w;
                g += lin.d_pose.transpose() * r * w;
            }
            Some((cost, h, g))
        };
        let newest = self.window.frames.len() - 1;
        for _ in 0..ALIGN_ITERATIONS {
            let frame = &self.window.frames[newest];
            let Some((cost, h, g)) = robust_cost(&frame.pose, frame) else { return };
            let Some(chol) = h.cholesky() else { return };
            let delta = chol.solve(&g);
            let candidate = retract(&frame.pose, delta.as_slice());
            match robust_cost(&candidate, frame) {
                Some((after, _, _)) if after < cost => self.window.frames[newest].pose = candidate,
                _ => return,
            }
            if delta.norm() < 1e-9 {
                return;
            }
        }
    }

    /// Recomputes per-frame inlier flags from the current estimate.
    fn update_gate(&mut self) {
        let landmarks = &self.window.landmarks;
        let intr = &self.intr;
        for frame in self.window.frames.iter_mut() {
            let norms: Vec<Option<f64>> = frame
                .observations
                .iter()
                .map(|o| {
                    let x = landmarks.get(&o.landmark_id)?;
                    let lin = linearize(&frame.pose, x, intr)?;
                    Some((o.measurement() - lin.prediction).norm())
                })
                .collect();
            let mut sorted: Vec<f64> = norms.iter().flatten().copied().collect();
            if sorted.is_empty() {
                continue;
            }
            sorted.sort_by(f64::total_cmp);
            let median = sorted[sorted.len() / 2];
            let gate = self.config.gate_min_px.max(self.config.gate_factor * median);
            for ((flag, n), o) in frame.inlier.iter_mut().zip(&norms).zip(&frame.observations) {
                // Unprojectable measurements of active landmarks are rejected.
                *flag = match n {
                    Some(v) => *v <= gate,
                    None => !landmarks.contains_key(&o.landmark_id),
                };
            }
        }
    }

    /// Parameter layout of the current window: free poses, landmark ids and
    /// the measurement terms that reference them.
    fn layout(&self) -> (Vec<Isometry3<f64>>, Vec<u64>, Vec<Point3<f64>>, Vec<Term>, Vec<(usize, usize)>) {
        let poses: Vec<Isometry3<f64>> = self.window.frames.iter().skip(1).map(|f| f.pose).collect();
        let mut usable = Vec::new();
        for (k, frame) in self.window.frames.iter().enumerate() {
            for (i, (o, &ok)) in frame.observations.iter().zip(&frame.inlier).enumerate() {
                if !ok {
                    continue;
                }
                let Some(x) = self.window.landmarks.get(&o.landmark_id) else { continue };
                if linearize(&frame.pose, x, &self.intr).is_some() {
                    usable.push((k, i, o.landmark_id));
                }
            }
        }
        let ids: Vec<u64> = usable.iter().map(|u| u.2).collect::<BTreeSet<_>>().into_iter().collect();
        let points: Vec<Point3<f64>> = ids.iter().map(|id| self.window.landmarks[id]).collect();
        let mut terms = Vec::with_capacity(usable.len());
        let mut origin = Vec::with_capacity(usable.len());
        for (k, i, id) in usable {
            let landmark = ids.binary_search(&id).expect("collected above");
            let measurement = self.window.frames[k].observations[i].measurement();
            terms.push(Term { pose: k.checked_sub(1), landmark, measurement });
            origin.push((k, i));
        }
        (poses, ids, points, terms, origin)
    }

    fn cost_of(&self, gauge: &Isometry3<f64>, poses: &[Isometry3<f64>], points: &[Point3<f64>], terms: &[Term]) -> f64 {
        terms
            .iter()
            .map(|t| {
                let pose = t.pose.map_or(gauge, |p| &poses[p]);
                linearize(pose, &points[t.landmark], &self.intr)
                    .map_or(f64::INFINITY, |lin| (t.measurement - lin.prediction).norm_squared())
            })
            .sum()
    }

    /// One damped Gauss–Newton step with the Levenberg–Marquardt schedule:
    /// λ is divided by 10 after an accepted step and multiplied by 10 after
    /// a rejected one.
    pub fn gauss_newton_step(&mut self, lambda: &mut f64) -> Result<StepReport> {
        let (poses, ids, points, terms, _) = self.layout();
        let gauge = self.window.frames[WindowState::FIXED_GAUGE].pose;
        let sigma = self.config.measurement_noise_px;
        let mut escalations = 0;
        loop {
            let eq = assemble(&poses, &gauge, &points, ids.clone(), &terms, &self.intr, sigma, *lambda)?;
            let step = solve_damped(&eq)?;
            let step_norm = step.norm();
            if step_norm <= 1e-10 {
                return Ok(StepReport { cost_before: eq.cost, cost_after: eq.cost, step_norm, lambda: *lambda, converged: true });
            }
            let new_poses: Vec<Isometry3<f64>> = poses
                .iter()
                .enumerate()
                .map(|(p, pose)| retract(pose, step.poses.fixed_rows::<6>(6 * p).as_slice()))
                .collect();
            let new_points: Vec<Point3<f64>> = points.iter().zip(&step.landmarks).map(|(x, d)| x + d).collect();
            let cost_after = self.cost_of(&gauge, &new_poses, &new_points, &terms);
            if cost_after <= eq.cost {
                for (frame, pose) in self.window.frames.iter_mut().skip(1).zip(&new_poses) {
                    frame.pose = *pose;
                }
                for (id, x) in ids.iter().zip(&new_points) {
                    self.window.landmarks.insert(*id, *x);
                }
                *lambda = (*lambda / 10.0).max(1e-12);
                let converged = eq.cost - cost_after <= 1e-12 * eq.cost.max(1e-300) || step_norm <= 1e-10;
                return Ok(StepReport { cost_before: eq.cost, cost_after, step_norm, lambda: *lambda, converged });
            }
            if (cost_after - eq.cost) <= 1e-12 * eq.cost {
                // Rounding-level increase: already at the optimum.
                return Ok(StepReport { cost_before: eq.cost, cost_after: eq.cost, step_norm, lambda: *lambda, converged: true });
            }
            escalations += 1;
            *lambda *= 10.0;
            if escalations >= self.config.max_escalations {
                return Err(Error::Diverged { frame: 0, reason: format!("cost increased after {escalations} damping escalations") });
            }
        }
    }

    /// Runs up to `max_iterations` steps on the current window, returning the
    /// number of steps taken and the last report.
    pub fn optimize(&mut self, max_iterations: usize) -> Result<(usize, StepReport)> {
        let mut lambda = self.config.initial_lambda;
        let mut last = None;
        for k in 0..max_iterations {
            let report = self.gauss_newton_step(&mut lambda)?;
            last = Some(report);
            if report.converged {
                return Ok((k + 1, report));
            }
        }
        Ok((max_iterations, last.ok_or_else(|| Error::Config("max_iterations must be positive".into()))?))
    }

    /// Normal equations at the current estimate with nominal noise.
    pub fn normal_equations(&self, lambda: f64) -> Result<NormalEquations> {
        let (poses, ids, points, terms, _) = self.layout();
        let gauge = self.window.frames[WindowState::FIXED_GAUGE].pose;
        assemble(&poses, &gauge, &points, ids, &terms, &self.intr, self.config.measurement_noise_px, lambda)
    }

    fn output(&self, state: TrackingState, iterations: usize, converged: bool, lambda: f64) -> Result<SolveOutput> {
        let current = self.current_frame();
        let pose_estimates = self.window.frames.iter().map(|f| (f.frame_id, f.pose)).collect();
        let observations = current.observations.len();
        let outliers = current.inlier.iter().filter(|ok| !**ok).count();
        let empty = |sigma: f64| SolveOutput {
            frame_id: current.frame_id,
            timestamp: current.timestamp,
            state,
            terms: Vec::new(),
            hessian: BlockHessian::new(0, Vec::new(), lambda),
            pose_estimates,
            iterations,
            converged,
            lambda,
            noise_sigma: sigma,
            outliers,
            observations,
        };
        if state != TrackingState::Tracking {
            return Ok(empty(self.config.measurement_noise_px));
        }
        let (poses, ids, points, terms, origin) = self.layout();
        let gauge = self.window.frames[WindowState::FIXED_GAUGE].pose;
        let mut sigma = self.config.measurement_noise_px;
        if self.config.posterior_noise {
            let rss = self.cost_of(&gauge, &poses, &points, &terms);
            let dof = (3 * terms.len()).saturating_sub(6 * poses.len() + 3 * points.len()).max(1);
            let estimate = (rss / dof as f64).sqrt();
            if estimate.is_finite() && estimate > 0.0 {
                sigma = estimate;
            }
        }
        let eq = assemble(&poses, &gauge, &points, ids.clone(), &terms, &self.intr, sigma, lambda)?;
        let mut out_terms = Vec::with_capacity(terms.len());
        for (term, (k, i)) in terms.iter().zip(&origin) {
            let frame = &self.window.frames[*k];
            let obs = &frame.observations[*i];
            let x = &points[term.landmark];
            let lin = linearize(&frame.pose, x, &self.intr).ok_or(Error::BehindCamera { depth: 0.0 })?;
            let jacobian = projection_jacobian(&frame.pose, x, &self.intr)?;
            out_terms.push(ObservationTerm {
                frame_id: frame.frame_id,
                feature_id: obs.feature_id,
                landmark_id: obs.landmark_id,
                residual: Vector2::new(term.measurement.x - lin.prediction.x, term.measurement.y - lin.prediction.y),
                jacobian,
            });
        }
        let mut out = empty(sigma);
        out.terms = out_terms;
        out.hessian = eq.hessian;
        Ok(out)
    }
}
