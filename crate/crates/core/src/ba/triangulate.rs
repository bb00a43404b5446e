use nalgebra::{Isometry3, Matrix3, Point3, Translation3, Vector2, Vector3};

use crate::camera::StereoIntrinsics;
use crate::error::{Error, Result};
use crate::scene::Observation;

/// Condition number of the ray normal matrix above which triangulation is
/// rejected.
pub const PARALLAX_CONDITION_LIMIT: f64 = 1e8;

/// One bearing: a camera pose (camera-to-world) and the pixel it saw.
#[derive(Debug, Clone, Copy)]
pub struct View {
    pub pose: Isometry3<f64>,
    pub pixel: Vector2<f64>,
}

/// Left and right camera views of a stereo observation.
pub fn stereo_views(pose: &Isometry3<f64>, obs: &Observation, intr: &StereoIntrinsics<f64>) -> [View; 2] {
    let right = pose * Translation3::new(intr.baseline, 0.0, 0.0);
    [
        View { pose: *pose, pixel: obs.pixel() },
        View { pose: right, pixel: Vector2::new(obs.pixel[0] - obs.disparity, obs.pixel[1]) },
    ]
}

/// Midpoint triangulation: the point minimizing the summed squared
/// distance to all viewing rays.
pub fn triangulate(views: &[View], intr: &StereoIntrinsics<f64>) -> Result<Point3<f64>> {
    let mut a = Matrix3::zeros();
    let mut b = Vector3::zeros();
    for view in views {
        let ray = Vector3::new((view.pixel.x - intr.cu) / intr.focal, (view.pixel.y - intr.cv) / intr.focal, 1.0);
        let d = (view.pose.rotation * ray).normalize();
        let proj = Matrix3::identity() - d * d.transpose();
        a += proj;
        b += proj * view.pose.translation.vector;
    }
    let eig = a.symmetric_eigen();
    let max = eig.eigenvalues.max();
    let min = eig.eigenvalues.min();
    let condition = if min > 0.0 { max / min } else { f64::INFINITY };
    if views.len() < 2 || !(condition <= PARALLAX_CONDITION_LIMIT) {
        return Err(Error::InsufficientParallax { condition });
    }
    let x = a.cholesky().ok_or(Error::InsufficientParallax { condition })?.solve(&b);
    Ok(Point3::from(x))
}
