//! Connectivity tangent kernels for finite networks.
//!
//! The core is generic over the scalar type; the aliases at the bottom of
//! this file fix it to `f64`.

mod error;
pub mod kernels;
pub mod laplace;
pub mod linalg;
pub mod metrics;
pub mod net;
pub mod pac_bayes;
mod ridge;
pub mod rng;
mod scalar;
pub mod transforms;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Params = net::ParamVector<f64>;
pub type Norm = net::NormState<f64>;
pub type Data = net::Batch<f64>;
pub type Jacobian = net::JacobianMatrix<f64>;
pub type Kernel = kernels::KernelMatrix<f64>;
pub type Posterior = laplace::GaussianPosterior<f64>;
