//! Gaussian posteriors of the linearized network and their predictives.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::net::{forward, linearized_predict, JacobianMatrix, NetworkSpec, NormState, ParamVector, Space, StatsMode};
use crate::pac_bayes::{solve_mu_q, SolveMethod};
use crate::ridge::Ridge;
use crate::{linalg, rng, Error, Result, Scalar};

/// Dense covariances are only formed up to this many parameters.
pub const DENSE_POSTERIOR_LIMIT: usize = 2000;
pub const JITTER_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Flavor {
    /// Connectivity Laplace.
    Cl,
    /// Linearized Laplace.
    Ll,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Covariance<T: Scalar> {
    Dense(DMatrix<T>),
    /// `D (I/α² + JᵀJ/σ²)⁻¹ D` with `D = diag(scale)` (identity when absent).
    Implicit { jacobian: DMatrix<T>, scale: Option<Vec<T>> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPosterior<T: Scalar> {
    pub space: Space,
    pub flavor: Flavor,
    pub mean: Vec<T>,
    pub covariance: Covariance<T>,
    pub alpha: f64,
    pub sigma: f64,
}

fn precision_inverse<T: Scalar>(j: &DMatrix<T>, alpha: f64, sigma: f64) -> Result<DMatrix<T>> {
    let s2 = T::lit(sigma * sigma);
    let a = linalg::add_diagonal(&(j.transpose() * j / s2), T::lit(1.0 / (alpha * alpha)));
    linalg::spd_inverse(&a)
}

fn scale_both<T: Scalar>(m: &DMatrix<T>, d: &[T]) -> DMatrix<T> {
    DMatrix::from_fn(m.nrows(), m.ncols(), |i, k| d[i] * m[(i, k)] * d[k])
}

impl<T: Scalar> GaussianPosterior<T> {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Dense covariance, forming it from the factors when implicit.
    pub fn covariance_dense(&self) -> Result<DMatrix<T>> {
        match &self.covariance {
            Covariance::Dense(c) => Ok(c.clone()),
            Covariance::Implicit { jacobian, scale } => {
                let inv = precision_inverse(jacobian, self.alpha, self.sigma)?;
                Ok(match scale {
                    Some(d) => scale_both(&inv, d),
                    None => inv,
                })
            }
        }
    }

    pub fn marginal_variances(&self) -> Result<Vec<T>> {
        Ok(self.covariance_dense()?.diagonal().as_slice().to_vec())
    }
}

fn covariance_for<T: Scalar>(j: &DMatrix<T>, alpha: f64, sigma: f64) -> Result<Covariance<T>> {
    if j.ncols() <= DENSE_POSTERIOR_LIMIT {
        Ok(Covariance::Dense(precision_inverse(j, alpha, sigma)?))
    } else {
        Ok(Covariance::Implicit {
            jacobian: j.clone(),
            scale: None,
        })
    }
}

fn check_scales(alpha: f64, sigma: f64) -> Result<()> {
    if !(alpha > 0.0 && sigma > 0.0 && alpha.is_finite() && sigma.is_finite()) {
        return Err(Error::InvalidArgument("alpha and sigma must be positive and finite".into()));
    }
    Ok(())
}

/// `N(μ_Q, (I/α² + J_cᵀJ_c/σ²)⁻¹)` over connectivity.
pub fn posterior_connectivity<T: Scalar>(
    j_c: &JacobianMatrix<T>,
    residual: &[T],
    alpha: f64,
    sigma: f64,
) -> Result<GaussianPosterior<T>> {
    check_scales(alpha, sigma)?;
    let mean = solve_mu_q(j_c, residual, alpha, sigma, SolveMethod::Direct)?;
    Ok(GaussianPosterior {
        space: Space::Connectivity,
        flavor: Flavor::Cl,
        mean,
        covariance: covariance_for(&j_c.values, alpha, sigma)?,
        alpha,
        sigma,
    })
}

/// Pushes a connectivity posterior through `ψ = θ* + θ*⊙c`. Coordinates
/// with `θ*_j = 0` stay at zero with zero variance.
pub fn posterior_parameter<T: Scalar>(qc: &GaussianPosterior<T>, theta: &[T]) -> Result<GaussianPosterior<T>> {
    if qc.space != Space::Connectivity {
        return Err(Error::InvalidArgument("posterior is not in connectivity space".into()));
    }
    if theta.len() != qc.dim() {
        return Err(Error::Shape(format!("θ has {} entries, posterior has {}", theta.len(), qc.dim())));
    }
    let mean = theta.iter().zip(&qc.mean).map(|(&t, &m)| t + t * m).collect();
    let covariance = match &qc.covariance {
        Covariance::Dense(s) => Covariance::Dense(scale_both(s, theta)),
        Covariance::Implicit { jacobian, scale } => Covariance::Implicit {
            jacobian: jacobian.clone(),
            scale: Some(match scale {
                Some(d) => d.iter().zip(theta).map(|(&a, &b)| a * b).collect(),
                None => theta.to_vec(),
            }),
        },
    };
    Ok(GaussianPosterior {
        space: Space::Parameter,
        flavor: Flavor::Cl,
        mean,
        covariance,
        alpha: qc.alpha,
        sigma: qc.sigma,
    })
}

/// `N(θ*, (I/α² + J_θᵀJ_θ/σ²)⁻¹)`.
pub fn ll_posterior<T: Scalar>(
    j_theta: &JacobianMatrix<T>,
    theta: &[T],
    alpha: f64,
    sigma: f64,
) -> Result<GaussianPosterior<T>> {
    check_scales(alpha, sigma)?;
    if theta.len() != j_theta.n_params() {
        return Err(Error::Shape("θ does not match the jacobian".into()));
    }
    Ok(GaussianPosterior {
        space: Space::Parameter,
        flavor: Flavor::Ll,
        mean: theta.to_vec(),
        covariance: covariance_for(&j_theta.values, alpha, sigma)?,
        alpha,
        sigma,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictiveForm {
    /// Kernel jitter `σ²/α²`; equal to the weight-space posterior predictive.
    #[default]
    Exact,
    /// The `σ²/α² → 0` limit.
    Limit,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictiveDistribution<T: Scalar> {
    /// One row per test point.
    pub mean: DMatrix<T>,
    /// K×K output covariance per test point.
    pub covariance: Vec<DMatrix<T>>,
    pub jitter: f64,
    pub condition_number: f64,
}

impl<T: Scalar> PredictiveDistribution<T> {
    /// Per-point, per-output variances.
    pub fn variances(&self) -> DMatrix<T> {
        let k = self.mean.ncols();
        DMatrix::from_fn(self.mean.nrows(), k, |i, o| self.covariance[i][(o, o)])
    }

    /// Per-point standard deviation averaged over outputs.
    pub fn mean_std(&self) -> Vec<f64> {
        self.covariance
            .iter()
            .map(|c| {
                let k = c.nrows().max(1) as f64;
                c.diagonal().iter().map(|v| v.as_f64().max(0.0).sqrt()).sum::<f64>() / k
            })
            .collect()
    }
}

/// Inputs to [`predictive`]: parameter-space Jacobians at the test and
/// training inputs, and the network outputs at the test inputs.
pub struct PredictiveInputs<'a, T: Scalar> {
    pub j_test: &'a JacobianMatrix<T>,
    pub j_train: &'a JacobianMatrix<T>,
    pub theta: &'a [T],
    pub f_test: &'a DMatrix<T>,
    /// Restricts both kernels to these parameters.
    pub mask: Option<&'a [bool]>,
}

/// Kernel-form predictive `N(f(x,θ*), α²K_xx − α²K_xX(K_XX + jitter·I)⁻¹K_Xx)`
/// with `K = C` for CL and `K = Θ` for LL.
pub fn predictive<T: Scalar>(
    flavor: Flavor,
    inputs: &PredictiveInputs<'_, T>,
    alpha: f64,
    sigma: f64,
    form: PredictiveForm,
) -> Result<PredictiveDistribution<T>> {
    check_scales(alpha, sigma)?;
    let PredictiveInputs {
        j_test,
        j_train,
        theta,
        f_test,
        mask,
    } = *inputs;
    if j_test.space != Space::Parameter || j_train.space != Space::Parameter {
        return Err(Error::InvalidArgument("predictive expects parameter-space jacobians".into()));
    }
    if j_test.n_params() != j_train.n_params() || f_test.nrows() != j_test.n_samples || f_test.ncols() != j_test.n_outputs {
        return Err(Error::Shape("test and train jacobians are inconsistent".into()));
    }
    let prepare = |j: &JacobianMatrix<T>| -> Result<DMatrix<T>> {
        let j = match flavor {
            Flavor::Cl => j.to_connectivity(theta)?,
            Flavor::Ll => j.clone(),
        };
        Ok(match mask {
            Some(m) => j.masked(m)?.values,
            None => j.values,
        })
    };
    let jx = prepare(j_test)?;
    let jt = prepare(j_train)?;
    let kxx_all = &jx * jx.transpose();
    let kxt = &jx * jt.transpose();
    let ktt = &jt * jt.transpose();

    let requested = match form {
        PredictiveForm::Exact => (sigma / alpha).powi(2),
        PredictiveForm::Limit => 0.0,
    };
    let eig = linalg::sym_eigenvalues_desc(&ktt);
    let (lmax, lmin) = match (eig.first(), eig.last()) {
        (Some(a), Some(b)) => (a.as_f64(), b.as_f64()),
        _ => (0.0, 0.0),
    };
    let cond = |j: f64| (lmax + j) / (lmin + j);
    let mut jitter = requested;
    if !(cond(jitter).is_finite() && cond(jitter) < 1e12 && lmin + jitter > 0.0) {
        jitter = jitter.max(JITTER_FLOOR);
    }
    let a = linalg::add_diagonal(&ktt, T::lit(jitter));
    let chol = a.cholesky().ok_or(Error::NotPositiveDefinite)?;
    let solved = chol.solve(&kxt.transpose());
    let reduction = &kxt * solved;
    let a2 = T::lit(alpha * alpha);
    let k = j_test.n_outputs;
    let covariance = (0..j_test.n_samples)
        .map(|i| {
            let blk = kxx_all.view((i * k, i * k), (k, k)) - reduction.view((i * k, i * k), (k, k));
            let mut c = blk * a2;
            // Symmetrize the block.
            for r in 0..k {
                for s in 0..r {
                    let v = (c[(r, s)] + c[(s, r)]) * T::lit(0.5);
                    c[(r, s)] = v;
                    c[(s, r)] = v;
                }
            }
            c
        })
        .collect();
    Ok(PredictiveDistribution {
        mean: f_test.clone(),
        covariance,
        jitter,
        condition_number: cond(jitter),
    })
}

/// Randomize-then-optimize samples from `N(μ, (I/α² + JᵀJ/σ²)⁻¹)`: each
/// sample perturbs the targets and the prior mean and solves the ridge
/// problem exactly. Sample `i` uses the stream `(seed, i)`.
pub fn rto_sample<T: Scalar>(
    j: &JacobianMatrix<T>,
    residual: &[T],
    alpha: f64,
    sigma: f64,
    seed: u64,
    n_samples: usize,
) -> Result<Vec<Vec<T>>> {
    check_scales(alpha, sigma)?;
    if n_samples == 0 {
        return Err(Error::InvalidArgument("n_samples must be at least 1".into()));
    }
    if residual.len() != j.n_rows() {
        return Err(Error::Shape("residual does not match the jacobian rows".into()));
    }
    let ridge = Ridge::new(&j.values, T::lit((sigma / alpha).powi(2)))?;
    let (rows, p) = (j.n_rows(), j.n_params());
    let (a, s) = (T::lit(alpha), T::lit(sigma));
    Ok((0..n_samples)
        .into_par_iter()
        .map(|i| {
            let mut r = rng::rng_for(seed, i as u64);
            let eps = rng::normal_vec(&mut r, rows, s);
            let c0 = rng::normal_vec(&mut r, p, a);
            let jc0 = ridge.apply_j(&c0);
            let target: Vec<T> = (0..rows).map(|k| residual[k] + eps[k] - jc0[k]).collect();
            let dc = ridge.solve(&target);
            c0.iter().zip(&dc).map(|(&x, &y)| x + y).collect()
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnsembleMode {
    #[default]
    Linearized,
    FullForward,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsemblePrediction<T: Scalar> {
    /// Averaged smoothed one-hot member predictions, N×K.
    pub probabilities: DMatrix<T>,
    /// Mean raw output, N×K.
    pub output_mean: DMatrix<T>,
    /// Trace of the across-member output covariance per point.
    pub variance: Vec<T>,
}

/// `(1 − s)·onehot + s/K`.
pub fn smoothed_one_hot<T: Scalar>(class: usize, classes: usize, smoothing: f64) -> Vec<T> {
    let base = smoothing / classes as f64;
    (0..classes)
        .map(|k| T::lit(if k == class { 1.0 - smoothing + base } else { base }))
        .collect()
}

/// Member outputs for perturbations in `space`, then their ensemble.
#[allow(clippy::too_many_arguments)]
pub fn ensemble_predict<T: Scalar>(
    samples: &[Vec<T>],
    spec: &NetworkSpec,
    params: &ParamVector<T>,
    norm: &NormState<T>,
    x: &DMatrix<T>,
    space: Space,
    mode: EnsembleMode,
    label_smoothing: f64,
) -> Result<EnsemblePrediction<T>> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("ensemble needs at least one member".into()));
    }
    if !(0.0..=1.0).contains(&label_smoothing) {
        return Err(Error::InvalidArgument("label smoothing must lie in [0, 1]".into()));
    }
    let theta = params.as_slice();
    let outputs = samples
        .par_iter()
        .map(|c| match mode {
            EnsembleMode::Linearized => linearized_predict(spec, params, norm, c, space, x),
            EnsembleMode::FullForward => {
                if c.len() != theta.len() {
                    return Err(Error::Shape("sample length does not match θ".into()));
                }
                let moved: Vec<T> = match space {
                    Space::Connectivity => theta.iter().zip(c).map(|(&t, &ci)| t + t * ci).collect(),
                    Space::Parameter => theta.iter().zip(c).map(|(&t, &ci)| t + ci).collect(),
                };
                forward(spec, &params.with_values(moved), norm, x, StatsMode::Running)
            }
        })
        .collect::<Result<Vec<DMatrix<T>>>>()?;
    Ok(ensemble_from_outputs(&outputs, label_smoothing))
}

/// Ensemble statistics from per-member output matrices.
pub fn ensemble_from_outputs<T: Scalar>(outputs: &[DMatrix<T>], label_smoothing: f64) -> EnsemblePrediction<T> {
    let m = T::count(outputs.len());
    let (n, k) = outputs[0].shape();
    let mut probabilities = DMatrix::zeros(n, k);
    for f in outputs {
        for (i, cls) in crate::net::argmax_rows(f).into_iter().enumerate() {
            let p = smoothed_one_hot::<T>(cls, k, label_smoothing);
            for o in 0..k {
                probabilities[(i, o)] += p[o] / m;
            }
        }
    }
    // Shifted by the first member so identical members give exactly zero.
    let base = &outputs[0];
    let mut shift_mean = DMatrix::<T>::zeros(n, k);
    let mut shift_sq = vec![T::zero(); n];
    for f in outputs {
        let d = f - base;
        for i in 0..n {
            for o in 0..k {
                shift_sq[i] += d[(i, o)] * d[(i, o)] / m;
            }
        }
        shift_mean += d / m;
    }
    let variance = (0..n)
        .map(|i| {
            let mm = (0..k).fold(T::zero(), |a, o| a + shift_mean[(i, o)] * shift_mean[(i, o)]);
            (shift_sq[i] - mm).max(T::zero())
        })
        .collect();
    let output_mean = base + shift_mean;
    EnsemblePrediction {
        probabilities,
        output_mean,
        variance,
    }
}

/// Weight-space predictive variance `J(x) Σ J(x)ᵀ` for one test point.
pub fn weight_space_variance<T: Scalar>(j_point: &DMatrix<T>, covariance: &DMatrix<T>) -> DMatrix<T> {
    j_point * covariance * j_point.transpose()
}

/// Sample mean and covariance of a set of vectors.
pub fn sample_moments<T: Scalar>(samples: &[Vec<T>]) -> (DVector<T>, DMatrix<T>) {
    let n = samples.len();
    let p = samples.first().map_or(0, |s| s.len());
    let mut mean = DVector::zeros(p);
    for s in samples {
        mean += DVector::from_column_slice(s);
    }
    mean /= T::count(n.max(1));
    let mut cov = DMatrix::zeros(p, p);
    for s in samples {
        let d = DVector::from_column_slice(s) - &mean;
        cov += &d * d.transpose();
    }
    cov /= T::count(n.saturating_sub(1).max(1));
    (mean, cov)
}
