use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::gram::KernelMatrix;
use crate::net::{forward, Batch, JacobianOperator, NetworkJacobian, NetworkSpec, NormState, ParamVector, Space, StatsMode};
use crate::{rng, Error, Result, Scalar};

pub const DEFAULT_PROBES: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEstimate {
    pub value: f64,
    pub probes: usize,
    pub per_probe_values: Vec<f64>,
    /// Sample standard deviation over √probes; NaN for a single probe.
    pub standard_error: f64,
}

impl TraceEstimate {
    fn from_samples(per_probe_values: Vec<f64>) -> Self {
        let n = per_probe_values.len();
        let value = per_probe_values.iter().sum::<f64>() / n as f64;
        let standard_error = if n > 1 {
            let var = per_probe_values.iter().map(|v| (v - value).powi(2)).sum::<f64>() / (n - 1) as f64;
            (var / n as f64).sqrt()
        } else {
            f64::NAN
        };
        Self {
            value,
            probes: n,
            per_probe_values,
            standard_error,
        }
    }
}

/// `tr(C)`.
pub fn connectivity_sharpness_exact<T: Scalar>(c: &KernelMatrix<T>) -> T {
    c.trace()
}

/// Hutchinson estimate of `tr(J Jᵀ)` from vector-Jacobian products only.
///
/// Each probe value is `Σ_b ‖J_bᵀ z_b‖²` over mini-batches `b`; cross-batch
/// terms drop out, which keeps the estimator unbiased for every batch size.
/// Probe `p` draws its Rademacher vector from `(seed, p)`, so the result
/// does not depend on the thread schedule.
pub fn hutchinson_trace<T: Scalar, J: JacobianOperator<T>>(
    jac: &J,
    probes: usize,
    batch_size: usize,
    seed: u64,
) -> Result<TraceEstimate> {
    if probes == 0 {
        return Err(Error::InvalidArgument("at least one probe is required".into()));
    }
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch_size must be positive".into()));
    }
    let (n, k) = (jac.n_samples(), jac.n_outputs());
    let values: Vec<f64> = (0..probes)
        .into_par_iter()
        .map(|p| {
            let mut r = rng::rng_for(seed, p as u64);
            let z = rng::rademacher_vec::<T, _>(&mut r, n * k);
            let mut acc = 0.0;
            let mut start = 0;
            while start < n {
                let end = (start + batch_size).min(n);
                let v = jac.vjp(start..end, &z[start * k..end * k]);
                acc += v.iter().map(|x| x.as_f64() * x.as_f64()).sum::<f64>();
                start = end;
            }
            acc
        })
        .collect();
    Ok(TraceEstimate::from_samples(values))
}

/// Matrix-free Connectivity Sharpness on `data`.
pub fn connectivity_sharpness_hutchinson<T: Scalar>(
    spec: &NetworkSpec,
    params: &ParamVector<T>,
    norm: &NormState<T>,
    data: &Batch<T>,
    probes: usize,
    batch_size: usize,
    seed: u64,
) -> Result<TraceEstimate> {
    let op = NetworkJacobian::new(spec, params, norm, &data.inputs, Space::Connectivity)?;
    hutchinson_trace(&op, probes, batch_size, seed)
}

/// Per-sample loss whose gradients enter the Fisher trace.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FisherLoss {
    /// `½‖f(x) − y‖²`.
    #[default]
    Squared,
}

/// Empirical Fisher trace `Σ_n ‖∇_θ ℓ_n‖²` at frozen statistics.
pub fn fisher_trace<T: Scalar>(
    spec: &NetworkSpec,
    params: &ParamVector<T>,
    norm: &NormState<T>,
    data: &Batch<T>,
    loss: FisherLoss,
) -> Result<T> {
    let FisherLoss::Squared = loss;
    if data.targets.ncols() != spec.output_dim() {
        return Err(Error::Shape("targets do not match the network output".into()));
    }
    let op = NetworkJacobian::new(spec, params, norm, &data.inputs, Space::Parameter)?;
    let f = forward(spec, params, norm, &data.inputs, StatsMode::Running)?;
    let residual = &f - &data.targets;
    let k = spec.output_dim();
    let per_sample: Vec<T> = (0..data.len())
        .into_par_iter()
        .map(|i| {
            let r: Vec<T> = (0..k).map(|o| residual[(i, o)]).collect();
            let g = op.vjp(i..i + 1, &r);
            g.iter().fold(T::zero(), |a, &x| a + x * x)
        })
        .collect();
    Ok(per_sample.into_iter().fold(T::zero(), |a, b| a + b))
}
