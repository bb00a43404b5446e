//! Rectified stereo pinhole camera.
//!
//! Poses are camera-to-world isometries; a landmark `x` is expressed in the
//! camera frame as `pose⁻¹ · x`. The camera looks along +z with +x right and
//! +y down. The right camera sits `baseline` meters along +x.

use nalgebra::{Isometry3, Point3, Vector2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{wide, Real};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StereoIntrinsics<T> {
    /// Focal length in pixels (square pixels).
    pub focal: T,
    pub cu: T,
    pub cv: T,
    /// Stereo baseline in meters.
    pub baseline: T,
    pub width: T,
    pub height: T,
}

impl<T: Real> StereoIntrinsics<T> {
    pub fn contains(&self, pixel: &Vector2<T>) -> bool {
        pixel.x >= T::zero() && pixel.y >= T::zero() && pixel.x < self.width && pixel.y < self.height
    }
}

/// Left-image pixel plus disparity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StereoProjection<T: Real> {
    pub pixel: Vector2<T>,
    pub disparity: T,
}

/// Landmark in camera coordinates.
#[inline]
pub fn to_camera<T: Real>(pose: &Isometry3<T>, landmark: &Point3<T>) -> Point3<T> {
    pose.inverse_transform_point(landmark)
}

/// Pinhole stereo projection: `u = f·x/z + c_u`, `v = f·y/z + c_v`, `d = f·b/z`.
pub fn project_stereo<T: Real>(
    pose: &Isometry3<T>,
    landmark: &Point3<T>,
    intrinsics: &StereoIntrinsics<T>,
) -> Result<StereoProjection<T>> {
    let p = to_camera(pose, landmark);
    if p.z <= T::zero() {
        return Err(Error::BehindCamera { depth: wide(p.z) });
    }
    let inv_z = T::one() / p.z;
    Ok(StereoProjection {
        pixel: Vector2::new(
            intrinsics.focal * p.x * inv_z + intrinsics.cu,
            intrinsics.focal * p.y * inv_z + intrinsics.cv,
        ),
        disparity: intrinsics.focal * intrinsics.baseline * inv_z,
    })
}
