//! Online localization-risk monitoring for a stereo sliding-window bundle
//! adjuster: simulation, backend, uncertainty propagation, risk fusion,
//! corruption injection and offline evaluation.

pub mod ba;
pub mod camera;
pub mod corruption;
pub mod error;
pub mod evaluation;
pub mod io;
pub mod pipeline;
pub mod risk;
pub mod rng;
pub mod scalar;
pub mod scene;
pub mod uncertainty;

pub use error::{Error, Result};
pub use scalar::Real;

pub type Monitor64 = risk::Monitor<f64>;
pub type Monitor32 = risk::Monitor<f32>;
pub type RiskEntry64 = risk::RiskEntry<f64>;
pub type FeatureInput64 = risk::FeatureInput<f64>;
pub type BlockHessian64 = uncertainty::BlockHessian<f64>;
pub type SchurSystem64 = uncertainty::SchurSystem<f64>;
pub type Intrinsics64 = camera::StereoIntrinsics<f64>;
