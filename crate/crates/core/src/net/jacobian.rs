use std::ops::Range;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::batch::{flatten_rows, unflatten_rows};
use super::model::{backward, check_inputs, forward_trace, tangent, StatsMode};
use super::norm::NormState;
use super::params::ParamVector;
use super::spec::NetworkSpec;
use crate::{Error, Result, Scalar};

/// Dense Jacobians are only materialized below this many entries.
pub const DENSE_JACOBIAN_LIMIT: usize = 100_000_000;

/// Which variable the Jacobian differentiates against: θ, or the
/// connectivity `c` in `θ* + θ*⊙c` (evaluated at `c = 0`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Space {
    Connectivity,
    Parameter,
}

/// NK×P Jacobian, rows ordered sample-major then output dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct JacobianMatrix<T: Scalar> {
    pub values: DMatrix<T>,
    pub n_samples: usize,
    pub n_outputs: usize,
    pub space: Space,
}

impl<T: Scalar> JacobianMatrix<T> {
    pub fn new(values: DMatrix<T>, n_samples: usize, n_outputs: usize, space: Space) -> Result<Self> {
        if values.nrows() != n_samples * n_outputs {
            return Err(Error::Shape(format!(
                "{} rows for {n_samples} samples × {n_outputs} outputs",
                values.nrows()
            )));
        }
        Ok(Self {
            values,
            n_samples,
            n_outputs,
            space,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_params(&self) -> usize {
        self.values.ncols()
    }

    /// `J_θ · diag(θ)`.
    pub fn to_connectivity(&self, theta: &[T]) -> Result<Self> {
        if self.space != Space::Parameter {
            return Err(Error::InvalidArgument("jacobian is already in connectivity space".into()));
        }
        if theta.len() != self.n_params() {
            return Err(Error::Shape(format!(
                "θ has {} entries, jacobian has {} columns",
                theta.len(),
                self.n_params()
            )));
        }
        Ok(Self {
            values: crate::linalg::scale_columns(&self.values, theta),
            n_samples: self.n_samples,
            n_outputs: self.n_outputs,
            space: Space::Connectivity,
        })
    }

    /// Zeroes the columns where `keep` is false.
    pub fn masked(&self, keep: &[bool]) -> Result<Self> {
        if keep.len() != self.n_params() {
            return Err(Error::Shape(format!(
                "mask has {} entries, jacobian has {} columns",
                keep.len(),
                self.n_params()
            )));
        }
        let mut values = self.values.clone();
        for (j, mut col) in values.column_iter_mut().enumerate() {
            if !keep[j] {
                col.fill(T::zero());
            }
        }
        Ok(Self { values, ..*self })
    }

    pub fn scaled(&self, t: T) -> Self {
        Self {
            values: &self.values * t,
            ..*self
        }
    }
}

/// Matrix-free access to a Jacobian through vector products.
pub trait JacobianOperator<T: Scalar>: Sync {
    fn n_samples(&self) -> usize;
    fn n_outputs(&self) -> usize;
    fn n_params(&self) -> usize;

    /// `J[samples]ᵀ · cotangent`, cotangent of length `samples.len()·K`.
    fn vjp(&self, samples: Range<usize>, cotangent: &[T]) -> Vec<T>;

    /// `J[samples] · tangent`, flattened sample-major.
    fn jvp(&self, samples: Range<usize>, tangent: &[T]) -> Vec<T>;

    fn n_rows(&self) -> usize {
        self.n_samples() * self.n_outputs()
    }
}

impl<T: Scalar> JacobianOperator<T> for JacobianMatrix<T> {
    fn n_samples(&self) -> usize {
        self.n_samples
    }

    fn n_outputs(&self) -> usize {
        self.n_outputs
    }

    fn n_params(&self) -> usize {
        self.values.ncols()
    }

    fn vjp(&self, samples: Range<usize>, cotangent: &[T]) -> Vec<T> {
        let k = self.n_outputs;
        let rows = self.values.rows(samples.start * k, samples.len() * k);
        let z = nalgebra::DVectorView::from_slice(cotangent, cotangent.len());
        (rows.transpose() * z).as_slice().to_vec()
    }

    fn jvp(&self, samples: Range<usize>, tangent: &[T]) -> Vec<T> {
        let k = self.n_outputs;
        let rows = self.values.rows(samples.start * k, samples.len() * k);
        let v = nalgebra::DVectorView::from_slice(tangent, tangent.len());
        (rows * v).as_slice().to_vec()
    }
}

/// Jacobian of a network at frozen statistics, never materialized.
pub struct NetworkJacobian<'a, T: Scalar> {
    spec: &'a NetworkSpec,
    params: &'a ParamVector<T>,
    norm: &'a NormState<T>,
    inputs: &'a DMatrix<T>,
    space: Space,
}

impl<'a, T: Scalar> NetworkJacobian<'a, T> {
    pub fn new(
        spec: &'a NetworkSpec,
        params: &'a ParamVector<T>,
        norm: &'a NormState<T>,
        inputs: &'a DMatrix<T>,
        space: Space,
    ) -> Result<Self> {
        check_inputs(spec, params.as_slice(), norm, inputs)?;
        Ok(Self {
            spec,
            params,
            norm,
            inputs,
            space,
        })
    }

    fn rows(&self, samples: &Range<usize>) -> DMatrix<T> {
        self.inputs.rows(samples.start, samples.len()).into_owned()
    }
}

impl<T: Scalar> JacobianOperator<T> for NetworkJacobian<'_, T> {
    fn n_samples(&self) -> usize {
        self.inputs.nrows()
    }

    fn n_outputs(&self) -> usize {
        self.spec.output_dim()
    }

    fn n_params(&self) -> usize {
        self.params.len()
    }

    fn vjp(&self, samples: Range<usize>, cotangent: &[T]) -> Vec<T> {
        let x = self.rows(&samples);
        let theta = self.params.as_slice();
        let trace = forward_trace(self.spec, self.params.layout(), theta, self.norm, &x, StatsMode::Running);
        let up = unflatten_rows(cotangent, samples.len(), self.n_outputs());
        let mut g = backward(self.spec, self.params.layout(), theta, &trace, &up);
        if self.space == Space::Connectivity {
            g.iter_mut().zip(theta).for_each(|(gi, &t)| *gi *= t);
        }
        g
    }

    fn jvp(&self, samples: Range<usize>, tangent_in: &[T]) -> Vec<T> {
        let x = self.rows(&samples);
        let theta = self.params.as_slice();
        let trace = forward_trace(self.spec, self.params.layout(), theta, self.norm, &x, StatsMode::Running);
        let t: Vec<T> = match self.space {
            Space::Connectivity => tangent_in.iter().zip(theta).map(|(&v, &th)| v * th).collect(),
            Space::Parameter => tangent_in.to_vec(),
        };
        flatten_rows(&tangent(self.spec, self.params.layout(), theta, &trace, &t))
    }
}

/// Dense `J_θ` by reverse accumulation, one backward pass per output.
pub fn jacobian_params<T: Scalar>(
    spec: &NetworkSpec,
    params: &ParamVector<T>,
    norm: &NormState<T>,
    x: &DMatrix<T>,
) -> Result<JacobianMatrix<T>> {
    check_inputs(spec, params.as_slice(), norm, x)?;
    let (n, k, p) = (x.nrows(), spec.output_dim(), params.len());
    let entries = n * k * p;
    if entries > DENSE_JACOBIAN_LIMIT {
        return Err(Error::JacobianTooLarge {
            entries,
            limit: DENSE_JACOBIAN_LIMIT,
        });
    }
    let theta = params.as_slice();
    let layout = params.layout();
    let per_sample: Vec<Vec<Vec<T>>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let xi = x.rows(i, 1).into_owned();
            let trace = forward_trace(spec, layout, theta, norm, &xi, StatsMode::Running);
            (0..k)
                .map(|o| {
                    let mut seed = DMatrix::zeros(1, k);
                    seed[(0, o)] = T::one();
                    backward(spec, layout, theta, &trace, &seed)
                })
                .collect()
        })
        .collect();
    let mut values = DMatrix::zeros(n * k, p);
    for (i, rows) in per_sample.iter().enumerate() {
        for (o, row) in rows.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                values[(i * k + o, j)] = v;
            }
        }
    }
    JacobianMatrix::new(values, n, k, Space::Parameter)
}

/// `J_c = J_θ · diag(θ*)`.
pub fn jacobian_connectivity<T: Scalar>(
    spec: &NetworkSpec,
    params: &ParamVector<T>,
    norm: &NormState<T>,
    x: &DMatrix<T>,
) -> Result<JacobianMatrix<T>> {
    jacobian_params(spec, params, norm, x)?.to_connectivity(params.as_slice())
}

/// First-order model around θ*: `f(X,θ*) + J_c c` or `f(X,θ*) + J_θ δ`.
pub fn linearized_predict<T: Scalar>(
    spec: &NetworkSpec,
    params: &ParamVector<T>,
    norm: &NormState<T>,
    perturbation: &[T],
    space: Space,
    x: &DMatrix<T>,
) -> Result<DMatrix<T>> {
    if perturbation.len() != params.len() {
        return Err(Error::Shape(format!(
            "perturbation has {} entries, expected {}",
            perturbation.len(),
            params.len()
        )));
    }
    let op = NetworkJacobian::new(spec, params, norm, x, space)?;
    let theta = params.as_slice();
    let trace = forward_trace(spec, params.layout(), theta, norm, x, StatsMode::Running);
    let mut out = trace.output.clone();
    if perturbation.iter().all(|v| *v == T::zero()) {
        return Ok(out);
    }
    let delta = op.jvp(0..x.nrows(), perturbation);
    let k = spec.output_dim();
    for i in 0..x.nrows() {
        for o in 0..k {
            out[(i, o)] += delta[i * k + o];
        }
    }
    Ok(out)
}
