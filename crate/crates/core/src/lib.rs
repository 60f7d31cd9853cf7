//! Two-stage differentiable architecture search for light-weight semantic
//! segmentation, with recursive half-channel partial wrapping of every
//! searched operation.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix the precision for everyday use.

pub mod analysis;
pub mod attention;
pub mod autodiff;
pub mod cell;
pub mod checks;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod primitives;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use autodiff::{ConvSpec, Tape, Var, IGNORE_LABEL};
pub use error::{Error, Result};
pub use params::{ParamId, ParamStore, Weight};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Tape32 = Tape<f32>;
pub type Tape64 = Tape<f64>;
