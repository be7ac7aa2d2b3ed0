use nalgebra::DMatrix;

use super::model::{check_inputs, forward_trace, StatsMode};
use super::norm::NormState;
use super::params::ParamVector;
use super::spec::NetworkSpec;
use crate::{Result, Scalar};

/// Network outputs `f(X, θ)` as an N×K matrix.
pub fn forward<T: Scalar>(
    spec: &NetworkSpec,
    params: &ParamVector<T>,
    norm: &NormState<T>,
    x: &DMatrix<T>,
    mode: StatsMode,
) -> Result<DMatrix<T>> {
    check_inputs(spec, params.as_slice(), norm, x)?;
    Ok(forward_trace(spec, params.layout(), params.as_slice(), norm, x, mode).output)
}

/// Forward pass at an arbitrary flat parameter vector with the layout of `spec`.
pub fn forward_at<T: Scalar>(
    spec: &NetworkSpec,
    theta: &[T],
    norm: &NormState<T>,
    x: &DMatrix<T>,
    mode: StatsMode,
) -> Result<DMatrix<T>> {
    let params = ParamVector::from_values(spec, theta.to_vec())?;
    forward(spec, &params, norm, x, mode)
}
