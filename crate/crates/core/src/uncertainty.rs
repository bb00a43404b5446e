//! Per-feature uncertainty from the bundle-adjustment normal matrix.
//!
//! The normal matrix is split into pose and landmark blocks
//!
//! ```text
//!     H = | H_pp  H_pl |
//!         | H_lp  H_ll |      H_ll block-diagonal (3x3 per landmark)
//! ```
//!
//! The marginal information of landmark `i` is the 3x3 block `S_ii` whose
//! inverse is the landmark's block of `H⁻¹`. It accounts for the coupling
//! through every pose and, via the poses, every other landmark. It is
//! evaluated through the reduced camera matrix
//! `R = H_pp − Σ_j H_pl,j H_ll,jj⁻¹ H_lp,j` (one Cholesky factorization
//! shared by all landmarks):
//!
//! ```text
//!     S_ii⁻¹ = C_i + C_i H_lp,i R⁻¹ H_pl,i C_i,     C_i = H_ll,ii⁻¹
//! ```
//!
//! For a system with a single landmark this is exactly
//! `H_ll,ii − H_lp,i H_pp⁻¹ H_pl,i`.

use nalgebra::{DMatrix, Isometry3, Matrix2, Matrix2x3, Matrix3, Matrix6x3, Point3, SymmetricEigen};

use crate::camera::{to_camera, StereoIntrinsics};
use crate::error::{Error, Result};
use crate::scalar::{lit, wide, Real};

/// Condition number above which a landmark block is pseudo-inverted.
pub const COVARIANCE_CONDITION_LIMIT: f64 = 1e10;
/// Condition number cap for degenerate projection Jacobians.
pub const KAPPA_CAP: f64 = 1e12;

/// Pose–landmark coupling of one landmark: non-zero 6x3 blocks keyed by
/// free-pose index.
#[derive(Debug, Clone, PartialEq)]
pub struct LandmarkCoupling<T: Real> {
    pub blocks: Vec<(usize, Matrix6x3<T>)>,
}

/// Gauss–Newton normal matrix in pose/landmark block form. Gauge poses are
/// already removed, so `num_poses` counts free poses only.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockHessian<T: Real> {
    pub num_poses: usize,
    /// `6P x 6P`, symmetric.
    pub pose_pose: DMatrix<T>,
    pub pose_landmark: Vec<LandmarkCoupling<T>>,
    pub landmark_landmark: Vec<Matrix3<T>>,
    /// Levenberg–Marquardt damping added to the whole diagonal.
    pub damping: T,
    /// Landmark id per block, ascending.
    pub landmark_ids: Vec<u64>,
}

impl<T: Real> BlockHessian<T> {
    pub fn new(num_poses: usize, landmark_ids: Vec<u64>, damping: T) -> Self {
        let n = landmark_ids.len();
        Self {
            num_poses,
            pose_pose: DMatrix::zeros(6 * num_poses, 6 * num_poses),
            pose_landmark: vec![LandmarkCoupling { blocks: Vec::new() }; n],
            landmark_landmark: vec![Matrix3::zeros(); n],
            damping,
            landmark_ids,
        }
    }

    pub fn num_landmarks(&self) -> usize {
        self.landmark_ids.len()
    }

    pub fn landmark_position(&self, id: u64) -> Option<usize> {
        self.landmark_ids.binary_search(&id).ok()
    }

    /// Full dense matrix, poses first. Damping is included when `damped`.
    pub fn to_dense(&self, damped: bool) -> DMatrix<T> {
        let np = 6 * self.num_poses;
        let n = np + 3 * self.num_landmarks();
        let mut h = DMatrix::zeros(n, n);
        h.view_mut((0, 0), (np, np)).copy_from(&self.pose_pose);
        for (i, (coupling, block)) in self.pose_landmark.iter().zip(&self.landmark_landmark).enumerate() {
            let c = np + 3 * i;
            h.fixed_view_mut::<3, 3>(c, c).copy_from(block);
            for (p, b) in &coupling.blocks {
                h.fixed_view_mut::<6, 3>(6 * p, c).copy_from(b);
                h.fixed_view_mut::<3, 6>(c, 6 * p).copy_from(&b.transpose());
            }
        }
        if damped {
            for k in 0..n {
                h[(k, k)] += self.damping;
            }
        }
        h
    }

    /// Builds a block Hessian from a dense matrix laid out as by [`Self::to_dense`].
    pub fn from_dense(num_poses: usize, landmark_ids: Vec<u64>, dense: &DMatrix<T>, damping: T) -> Self {
        let np = 6 * num_poses;
        let mut h = Self::new(num_poses, landmark_ids, damping);
        h.pose_pose.copy_from(&dense.view((0, 0), (np, np)));
        for i in 0..h.num_landmarks() {
            let c = np + 3 * i;
            h.landmark_landmark[i] = dense.fixed_view::<3, 3>(c, c).into_owned();
            for p in 0..num_poses {
                let b: Matrix6x3<T> = dense.fixed_view::<6, 3>(6 * p, c).into_owned();
                if b.iter().any(|v| *v != T::zero()) {
                    h.pose_landmark[i].blocks.push((p, b));
                }
            }
        }
        h
    }
}

/// Marginal landmark information blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct SchurSystem<T: Real> {
    pub blocks: Vec<Matrix3<T>>,
    pub landmark_ids: Vec<u64>,
    pub damping: T,
}

impl<T: Real> SchurSystem<T> {
    pub fn block(&self, landmark_id: u64) -> Option<&Matrix3<T>> {
        self.landmark_ids.binary_search(&landmark_id).ok().map(|k| &self.blocks[k])
    }
}

fn symmetrize3<T: Real>(m: &Matrix3<T>) -> Matrix3<T> {
    (m + m.transpose()) * lit::<T>(0.5)
}

fn spd_inverse3<T: Real>(m: &Matrix3<T>) -> Option<Matrix3<T>> {
    m.cholesky().map(|c| symmetrize3(&c.inverse()))
}

/// `(H_ll,ii + λI)⁻¹` for every landmark.
pub fn conditional_covariances<T: Real>(h: &BlockHessian<T>) -> Result<Vec<Matrix3<T>>> {
    let damping_identity = Matrix3::identity() * h.damping;
    h.landmark_landmark
        .iter()
        .zip(&h.landmark_ids)
        .map(|(block, id)| spd_inverse3(&(block + damping_identity)).ok_or(Error::RankDeficient { landmark: *id }))
        .collect()
}

/// Damped reduced camera matrix `H_pp + λI − Σ_j H_pl,j C_j H_lp,j`.
pub fn reduced_camera_matrix<T: Real>(h: &BlockHessian<T>, conditional: &[Matrix3<T>]) -> DMatrix<T> {
    let n = 6 * h.num_poses;
    let mut reduced = h.pose_pose.clone();
    for k in 0..n {
        reduced[(k, k)] += h.damping;
    }
    for (coupling, c) in h.pose_landmark.iter().zip(conditional) {
        for (pa, ba) in &coupling.blocks {
            let ea = ba * c;
            for (pb, bb) in &coupling.blocks {
                if pb < pa {
                    continue;
                }
                let block = ea * bb.transpose();
                let mut target = reduced.fixed_view_mut::<6, 6>(6 * pa, 6 * pb);
                target -= block;
            }
        }
    }
    // Only the upper block triangle was accumulated; mirror it.
    for r in 0..n {
        for c in 0..r {
            reduced[(r, c)] = reduced[(c, r)];
        }
    }
    reduced
}

/// Factorized reduced camera matrix, reusable across landmarks.
struct ReducedCamera<T: Real> {
    /// Row-major copy of the lower Cholesky factor.
    lower_rows: Vec<T>,
    n: usize,
}

impl<T: Real> ReducedCamera<T> {
    fn new(h: &BlockHessian<T>, conditional: &[Matrix3<T>]) -> Result<Self> {
        let n = 6 * h.num_poses;
        let chol = reduced_camera_matrix(h, conditional).cholesky().ok_or(Error::PoseBlockSingular)?;
        let l = chol.l();
        let mut lower_rows = vec![T::zero(); n * n];
        for r in 0..n {
            for c in 0..=r {
                lower_rows[r * n + c] = l[(r, c)];
            }
        }
        Ok(Self { lower_rows, n })
    }

    /// `(L⁻¹ Eⱼ)ᵀ(L⁻¹ Eⱼ)` for a batch of sparse 6-block columns `Eⱼ`.
    ///
    /// The batch is solved as one triangular system laid out pose-row-major,
    /// so the inner update runs contiguously across all columns.
    fn quadratics(&self, columns: &[Vec<(usize, Matrix6x3<T>)>]) -> Vec<Matrix3<T>> {
        let n = self.n;
        let width = 3 * columns.len();
        let mut z = vec![T::zero(); n * width];
        for (q, blocks) in columns.iter().enumerate() {
            for (p, e) in blocks {
                for r in 0..6 {
                    for k in 0..3 {
                        z[(6 * p + r) * width + 3 * q + k] = e[(r, k)];
                    }
                }
            }
        }
        for r in 0..n {
            let (done, rest) = z.split_at_mut(r * width);
            let row = &mut rest[..width];
            for c in 0..r {
                let l = self.lower_rows[r * n + c];
                if l == T::zero() {
                    continue;
                }
                for (x, y) in row.iter_mut().zip(&done[c * width..(c + 1) * width]) {
                    *x -= l * *y;
                }
            }
            let inv_d = T::one() / self.lower_rows[r * n + r];
            for x in row.iter_mut() {
                *x *= inv_d;
            }
        }
        let mut grams = vec![Matrix3::zeros(); columns.len()];
        for r in 0..n {
            let row = &z[r * width..(r + 1) * width];
            for (q, gram) in grams.iter_mut().enumerate() {
                let v = &row[3 * q..3 * q + 3];
                for a in 0..3 {
                    for b in a..3 {
                        gram[(a, b)] += v[a] * v[b];
                    }
                }
            }
        }
        for gram in &mut grams {
            for a in 0..3 {
                for b in 0..a {
                    gram[(a, b)] = gram[(b, a)];
                }
            }
        }
        grams
    }
}

/// Marginal information blocks for every landmark of `h`.
pub fn schur_complement<T: Real>(h: &BlockHessian<T>) -> Result<SchurSystem<T>> {
    let all: Vec<u64> = h.landmark_ids.clone();
    schur_complement_for(h, &all)
}

/// Marginal information blocks for the listed landmarks only. Ids absent
/// from `h` are skipped.
pub fn schur_complement_for<T: Real>(h: &BlockHessian<T>, landmark_ids: &[u64]) -> Result<SchurSystem<T>> {
    let damping_identity = Matrix3::identity() * h.damping;
    let conditional = conditional_covariances(h)?;
    let reduced = if h.num_poses > 0 { Some(ReducedCamera::new(h, &conditional)?) } else { None };

    let mut ids: Vec<u64> = landmark_ids.iter().copied().filter(|id| h.landmark_position(*id).is_some()).collect();
    ids.sort_unstable();
    ids.dedup();
    let positions: Vec<usize> = ids.iter().map(|id| h.landmark_position(*id).expect("filtered above")).collect();
    let coupled = |i: usize| h.pose_landmark[i].blocks.iter().any(|(_, b)| b.iter().any(|v| *v != T::zero()));
    let mut blocks: Vec<Matrix3<T>> = positions.iter().map(|&i| h.landmark_landmark[i] + damping_identity).collect();
    if let Some(reduced) = &reduced {
        let selected: Vec<usize> = (0..ids.len()).filter(|&q| coupled(positions[q])).collect();
        let columns: Vec<Vec<(usize, Matrix6x3<T>)>> = selected
            .iter()
            .map(|&q| {
                let i = positions[q];
                h.pose_landmark[i].blocks.iter().map(|(p, b)| (*p, b * conditional[i])).collect()
            })
            .collect();
        for (&q, gram) in selected.iter().zip(reduced.quadratics(&columns)) {
            let marginal_cov = conditional[positions[q]] + gram;
            let info = spd_inverse3(&symmetrize3(&marginal_cov)).ok_or(Error::RankDeficient { landmark: ids[q] })?;
            blocks[q] = symmetrize3(&info);
        }
    }
    Ok(SchurSystem { blocks, landmark_ids: ids, damping: h.damping })
}

/// World covariance of one landmark, with a flag when the information
/// block had to be pseudo-inverted.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LandmarkCovariance<T: Real> {
    pub covariance: Matrix3<T>,
    pub saturated: bool,
}

/// Inverts a marginal information block. Blocks with condition number above
/// [`COVARIANCE_CONDITION_LIMIT`] are pseudo-inverted and flagged.
pub fn covariance_from_information<T: Real>(info: &Matrix3<T>) -> LandmarkCovariance<T> {
    let sym = symmetrize3(info);
    let limit = lit::<T>(COVARIANCE_CONDITION_LIMIT);
    // tr(S)·tr(S⁻¹) bounds the condition number from above, so most blocks
    // skip the eigendecomposition.
    if let Some(inv) = spd_inverse3(&sym) {
        if sym.trace() * inv.trace() <= limit {
            return LandmarkCovariance { covariance: inv, saturated: false };
        }
    }
    let eig = SymmetricEigen::new(sym);
    let max = eig.eigenvalues.iter().fold(T::zero(), |m, v| m.max(v.abs()));
    let min = eig.eigenvalues.iter().fold(T::max_value().unwrap_or(max), |m, v| m.min(*v));
    if max > T::zero() && min > T::zero() && max / min <= limit {
        if let Some(inv) = spd_inverse3(&sym).or_else(|| sym.try_inverse().map(|m| symmetrize3(&m))) {
            return LandmarkCovariance { covariance: inv, saturated: false };
        }
    }
    let cutoff = max / limit;
    let mut inv_diag = eig.eigenvalues;
    for v in inv_diag.iter_mut() {
        *v = if *v > cutoff && *v > T::zero() { T::one() / *v } else { T::zero() };
    }
    let pinv = eig.eigenvectors * Matrix3::from_diagonal(&inv_diag) * eig.eigenvectors.transpose();
    LandmarkCovariance { covariance: symmetrize3(&pinv), saturated: true }
}

/// `Σ_world,i` for `landmark_id`, or `None` when the landmark has no block.
pub fn landmark_covariance<T: Real>(system: &SchurSystem<T>, landmark_id: u64) -> Option<LandmarkCovariance<T>> {
    system.block(landmark_id).map(covariance_from_information)
}

/// Jacobian of the left-image projection with respect to world landmark
/// coordinates, `2x3` in pixels per meter.
pub fn projection_jacobian<T: Real>(
    pose: &Isometry3<T>,
    landmark: &Point3<T>,
    intrinsics: &StereoIntrinsics<T>,
) -> Result<Matrix2x3<T>> {
    let p = to_camera(pose, landmark);
    if p.z <= T::zero() {
        return Err(Error::BehindCamera { depth: wide(p.z) });
    }
    let f = intrinsics.focal;
    let inv_z = T::one() / p.z;
    let d_cam = Matrix2x3::new(
        f * inv_z, T::zero(), -f * p.x * inv_z * inv_z,
        T::zero(), f * inv_z, -f * p.y * inv_z * inv_z,
    );
    let r_cw = pose.rotation.to_rotation_matrix().into_inner().transpose();
    Ok(d_cam * r_cw)
}

/// Pixel covariance pushed through the projection Jacobian.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelCovariance<T: Real> {
    pub covariance: Matrix2<T>,
    /// `√tr(Σ_pixel)`.
    pub sigma_px: T,
}

pub fn propagate_pixel_covariance<T: Real>(jacobian: &Matrix2x3<T>, world: &Matrix3<T>) -> PixelCovariance<T> {
    let cov = jacobian * world * jacobian.transpose();
    let cov = (cov + cov.transpose()) * lit::<T>(0.5);
    let trace = cov.trace().max(T::zero());
    PixelCovariance { covariance: cov, sigma_px: trace.sqrt() }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Conditioning<T: Real> {
    pub kappa: T,
    pub log_kappa: T,
    pub saturated: bool,
}

/// Singular values `(σ_max, σ_min)` of a 2x3 matrix via its 2x2 Gram matrix.
pub fn singular_values_2x3<T: Real>(j: &Matrix2x3<T>) -> (T, T) {
    let g = j * j.transpose();
    let half = lit::<T>(0.5);
    let mean = (g[(0, 0)] + g[(1, 1)]) * half;
    let diff = (g[(0, 0)] - g[(1, 1)]) * half;
    let spread = (diff * diff + g[(0, 1)] * g[(1, 0)]).sqrt();
    let big = mean + spread;
    let det = g[(0, 0)] * g[(1, 1)] - g[(0, 1)] * g[(1, 0)];
    let small = if big > T::zero() { (det / big).max(T::zero()) } else { T::zero() };
    (big.sqrt(), small.sqrt())
}

/// `κ = σ_max / σ_min` of the projection Jacobian.
pub fn jacobian_condition<T: Real>(jacobian: &Matrix2x3<T>) -> Result<Conditioning<T>> {
    if jacobian.norm() == T::zero() {
        return Err(Error::ZeroJacobian);
    }
    let (s_max, s_min) = singular_values_2x3(jacobian);
    let cap = lit::<T>(KAPPA_CAP);
    if s_min < s_max / cap {
        return Ok(Conditioning { kappa: cap, log_kappa: cap.ln(), saturated: true });
    }
    let kappa = (s_max / s_min).max(T::one());
    Ok(Conditioning { kappa, log_kappa: kappa.ln(), saturated: false })
}

/// Depth change per pixel of disparity error, `d² / (f·b)` in m/px.
pub fn depth_sensitivity<T: Real>(depth: T, focal: T, baseline: T) -> T {
    depth * depth / (focal * baseline)
}

/// Everything the risk engine needs to know about one tracked feature.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureUncertainty<T: Real> {
    pub feature_id: u64,
    pub world_covariance: Matrix3<T>,
    pub pixel_covariance: Matrix2<T>,
    pub sigma_px: T,
    pub residual_norm: T,
    pub kappa: T,
    pub log_kappa: T,
    /// Present when the feature depth is known.
    pub depth_sensitivity: Option<T>,
    pub saturated: bool,
}

impl<T: Real> FeatureUncertainty<T> {
    /// Runs the per-feature chain: information block → world covariance →
    /// pixel covariance, plus Jacobian conditioning.
    pub fn evaluate(
        feature_id: u64,
        residual_norm: T,
        jacobian: &Matrix2x3<T>,
        information: &Matrix3<T>,
    ) -> Self {
        let world = covariance_from_information(information);
        let pixel = propagate_pixel_covariance(jacobian, &world.covariance);
        let cond = jacobian_condition(jacobian).unwrap_or(Conditioning {
            kappa: lit(KAPPA_CAP),
            log_kappa: lit::<T>(KAPPA_CAP).ln(),
            saturated: true,
        });
        Self {
            feature_id,
            world_covariance: world.covariance,
            pixel_covariance: pixel.covariance,
            sigma_px: pixel.sigma_px,
            residual_norm,
            kappa: cond.kappa,
            log_kappa: cond.log_kappa,
            depth_sensitivity: None,
            saturated: world.saturated || cond.saturated,
        }
    }
}
