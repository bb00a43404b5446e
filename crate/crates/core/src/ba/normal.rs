//! Stereo reprojection model and normal-matrix assembly.

use nalgebra::{DVector, Isometry3, Matrix3, Matrix3x6, Point3, Vector3};

use crate::camera::StereoIntrinsics;
use crate::error::{Error, Result};
use crate::uncertainty::BlockHessian;

/// Predicted stereo measurement `(u, v, d)` with its Jacobians with respect
/// to the pose perturbation `[φ, δt]` and the world landmark.
#[derive(Debug, Clone, Copy)]
pub struct Linearization {
    pub prediction: Vector3<f64>,
    pub d_pose: Matrix3x6<f64>,
    pub d_landmark: Matrix3<f64>,
}

/// Stereo measurement function. Pose updates are applied on the left:
/// `R ← exp(φ)·R`, `t ← t + δt`.
pub fn linearize(pose: &Isometry3<f64>, landmark: &Point3<f64>, intr: &StereoIntrinsics<f64>) -> Option<Linearization> {
    let r_wc = pose.rotation.to_rotation_matrix().into_inner();
    let r_cw = r_wc.transpose();
    let offset = landmark.coords - pose.translation.vector;
    let p = r_cw * offset;
    if p.z <= 1e-9 {
        return None;
    }
    let f = intr.focal;
    let iz = 1.0 / p.z;
    let prediction = Vector3::new(f * p.x * iz + intr.cu, f * p.y * iz + intr.cv, f * intr.baseline * iz);
    let d_cam = Matrix3::new(
        f * iz, 0.0, -f * p.x * iz * iz,
        0.0, f * iz, -f * p.y * iz * iz,
        0.0, 0.0, -f * intr.baseline * iz * iz,
    );
    let d_landmark = d_cam * r_cw;
    let mut d_pose = Matrix3x6::zeros();
    d_pose.fixed_view_mut::<3, 3>(0, 0).copy_from(&(d_landmark * offset.cross_matrix()));
    d_pose.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-d_landmark));
    Some(Linearization { prediction, d_pose, d_landmark })
}

/// One measurement inside the window, already resolved to parameter
/// indices.
#[derive(Debug, Clone, Copy)]
pub struct Term {
    /// Free-pose index, `None` for the gauge pose.
    pub pose: Option<usize>,
    /// Landmark block index.
    pub landmark: usize,
    pub measurement: Vector3<f64>,
}

/// Normal equations of the whole window.
#[derive(Debug, Clone)]
pub struct NormalEquations {
    pub hessian: BlockHessian<f64>,
    pub pose_gradient: DVector<f64>,
    pub landmark_gradient: Vec<Vector3<f64>>,
    /// Sum of squared residuals in px².
    pub cost: f64,
}

/// Accumulates `H = Jᵀ Σ⁻¹ J` and `g = Jᵀ Σ⁻¹ r` with `Σ = σ² I`.
pub fn assemble(
    poses: &[Isometry3<f64>],
    gauge: &Isometry3<f64>,
    landmarks: &[Point3<f64>],
    landmark_ids: Vec<u64>,
    terms: &[Term],
    intr: &StereoIntrinsics<f64>,
    sigma: f64,
    damping: f64,
) -> Result<NormalEquations> {
    let weight = 1.0 / (sigma * sigma);
    let mut h = BlockHessian::new(poses.len(), landmark_ids, damping);
    let mut pose_gradient = DVector::zeros(6 * poses.len());
    let mut landmark_gradient = vec![Vector3::zeros(); landmarks.len()];
    let mut cost = 0.0;
    for term in terms {
        let pose = term.pose.map_or(gauge, |p| &poses[p]);
        let lin = linearize(pose, &landmarks[term.landmark], intr)
            .ok_or(Error::BehindCamera { depth: 0.0 })?;
        let r = term.measurement - lin.prediction;
        cost += r.norm_squared();
        let jl_t = lin.d_landmark.transpose() * weight;
        h.landmark_landmark[term.landmark] += jl_t * lin.d_landmark;
        landmark_gradient[term.landmark] += jl_t * r;
        if let Some(p) = term.pose {
            let jp_t = lin.d_pose.transpose() * weight;
            let mut block = h.pose_pose.fixed_view_mut::<6, 6>(6 * p, 6 * p);
            block += jp_t * lin.d_pose;
            let mut g = pose_gradient.fixed_rows_mut::<6>(6 * p);
            g += jp_t * r;
            let coupling = jp_t * lin.d_landmark;
            let blocks = &mut h.pose_landmark[term.landmark].blocks;
            match blocks.iter_mut().find(|(q, _)| *q == p) {
                Some((_, b)) => *b += coupling,
                None => blocks.push((p, coupling)),
            }
        }
    }
    for (block, id) in h.landmark_landmark.iter().zip(&h.landmark_ids) {
        if block.determinant().abs() <= 1e-12 * block.norm().powi(3) || block.norm() == 0.0 {
            return Err(Error::RankDeficient { landmark: *id });
        }
    }
    for coupling in &mut h.pose_landmark {
        coupling.blocks.sort_by_key(|(p, _)| *p);
    }
    Ok(NormalEquations { hessian: h, pose_gradient, landmark_gradient, cost })
}

/// Solution of the damped normal equations.
#[derive(Debug, Clone)]
pub struct Step {
    pub poses: DVector<f64>,
    pub landmarks: Vec<Vector3<f64>>,
}

impl Step {
    pub fn norm(&self) -> f64 {
        (self.poses.norm_squared() + self.landmarks.iter().map(|l| l.norm_squared()).sum::<f64>()).sqrt()
    }
}

/// Solves `(H + λI) δ = g` by eliminating landmarks first.
pub fn solve_damped(eq: &NormalEquations) -> Result<Step> {
    let h = &eq.hessian;
    let conditional = crate::uncertainty::conditional_covariances(h)?;
    let mut rhs = eq.pose_gradient.clone();
    for ((coupling, c), g) in h.pose_landmark.iter().zip(&conditional).zip(&eq.landmark_gradient) {
        let cg = c * g;
        for (p, b) in &coupling.blocks {
            let mut seg = rhs.fixed_rows_mut::<6>(6 * p);
            seg -= b * cg;
        }
    }
    let poses = if h.num_poses > 0 {
        let reduced = crate::uncertainty::reduced_camera_matrix(h, &conditional);
        reduced.cholesky().ok_or(Error::PoseBlockSingular)?.solve(&rhs)
    } else {
        DVector::zeros(0)
    };
    let landmarks = h
        .pose_landmark
        .iter()
        .zip(&conditional)
        .zip(&eq.landmark_gradient)
        .map(|((coupling, c), g)| {
            let mut v = *g;
            for (p, b) in &coupling.blocks {
                v -= b.transpose() * poses.fixed_rows::<6>(6 * p);
            }
            c * v
        })
        .collect();
    Ok(Step { poses, landmarks })
}

/// Applies a pose increment `[φ, δt]` on the left.
pub fn retract(pose: &Isometry3<f64>, delta: &[f64]) -> Isometry3<f64> {
    let rot = nalgebra::UnitQuaternion::from_scaled_axis(Vector3::new(delta[0], delta[1], delta[2]));
    Isometry3::from_parts(
        nalgebra::Translation3::from(pose.translation.vector + Vector3::new(delta[3], delta[4], delta[5])),
        rot * pose.rotation,
    )
}
