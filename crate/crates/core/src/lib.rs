//! Impulse-response estimation for multi-input multi-output output-error
//! systems with a stable-spline smoothness prior and a log-det rank penalty on
//! the block Hankel matrix, plus the baselines, data generators and Monte
//! Carlo harness used to compare them.
//!
//! Numerical code is generic over [`Real`] (`f32` or `f64`); the `*64`
//! aliases below fix the scalar to `f64`.

pub mod data;
pub mod error;
pub mod estimators;
pub mod harness;
pub mod hankel;
pub mod impulse;
pub mod kernels;
pub mod linalg;
pub mod optim;
pub mod scalar;
pub mod simulation;

pub use data::{build_regressor, stack_outputs, Dataset, Regressor};
pub use error::{Error, Result};
pub use hankel::{
    build_hankel, build_vectorization_map, choose_hankel_shape, surrogate_weights, HankelShape, HankelSpec,
    VectorizationMap,
};
pub use impulse::{ImpulseResponse, ImpulseResponseRecord};
pub use kernels::{stable_spline_gram, ChannelKernel, KernelModel, KernelOrder};
pub use scalar::Real;

pub type Dataset64 = Dataset<f64>;
pub type ImpulseResponse64 = ImpulseResponse<f64>;
pub type HankelSpec64 = HankelSpec<f64>;
pub type KernelModel64 = KernelModel<f64>;
pub type SsEstimate64 = estimators::SsEstimate<f64>;
pub type SsrFit64 = estimators::SsrFit<f64>;
pub type AtomFit64 = estimators::AtomFit<f64>;
