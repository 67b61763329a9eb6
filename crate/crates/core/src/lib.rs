//! Solvers for singular mean-field forward and backward stochastic Volterra
//! integral equations on finite-dimensional state spaces.

pub mod backward;
pub mod control;
pub mod error;
pub mod forward;
pub mod fractional;
pub mod kernels;
pub mod scalar;
pub mod stochastic;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// `f64` kernel.
pub type Kernel = kernels::SingularKernel<f64>;
/// `f64` partition.
pub type Partition = kernels::Partition<f64>;
