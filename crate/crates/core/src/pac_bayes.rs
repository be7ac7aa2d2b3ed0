//! PAC-Bayes bounds with CTK (connectivity) or NTK (parameter) curvature.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::kernels::{dense_spectrum, empirical_ntk, lanczos_spectrum, KernelOperator, SpectrumMethod};
use crate::laplace::rto_sample;
use crate::net::{
    argmax_rows, flatten_rows, forward, jacobian_params, linearized_predict, Batch, JacobianMatrix, JacobianOperator,
    NetworkJacobian, NetworkSpec, NormState, ParamVector, Space, StatsMode,
};
use crate::ridge::Ridge;
use crate::{linalg, Error, Result, Scalar};

pub const DEFAULT_DELTA: f64 = 0.1;
pub const DENSE_EIGEN_LIMIT: usize = 2000;
pub const LANCZOS_ITERS: usize = 100;
pub const DEFAULT_ERROR_SAMPLES: usize = 8;
pub const CG_TOLERANCE: f64 = 1e-10;

/// `h(x) = x − ln x − 1`.
pub fn h<T: Scalar>(x: T) -> Result<T> {
    if !(x > T::zero()) {
        return Err(Error::InvalidArgument(format!("h is defined for x > 0, got {x}")));
    }
    Ok(x - x.ln() - T::one())
}

/// `h(1/(1+s))` without the cancellation near `s = 0`.
fn h_of_ratio(s: f64) -> f64 {
    if s < 1e-3 {
        // Σ_{n≥2} (−1)ⁿ (n−1)/n sⁿ
        let mut acc = 0.0;
        let mut pow = s * s;
        for n in 2..10 {
            let sign = if n % 2 == 0 { 1.0 } else { -1.0 };
            acc += sign * (n as f64 - 1.0) / n as f64 * pow;
            pow *= s;
        }
        acc
    } else {
        s.ln_1p() - s / (1.0 + s)
    }
}

/// Eigenvalues at or below this are treated as exact zeros.
pub fn zero_eigenvalue_threshold(max_abs: f64, dim: usize) -> f64 {
    max_abs * dim.max(1) as f64 * f64::EPSILON * 100.0
}

fn nonzero_eigenvalues<T: Scalar>(lambdas: &[T]) -> Vec<f64> {
    let vals: Vec<f64> = lambdas.iter().map(|l| l.as_f64()).collect();
    let max = vals.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let tol = zero_eigenvalue_threshold(max, vals.len());
    vals.into_iter().filter(|&l| l > tol).collect()
}

/// `β_i = σ²/(σ² + α²λ_i)` for the nonzero eigenvalues, padded with ones to
/// length `p`.
pub fn beta_from_eigs<T: Scalar>(lambdas: &[T], alpha: f64, sigma: f64, p: usize) -> Vec<f64> {
    let (a2, s2) = (alpha * alpha, sigma * sigma);
    let mut betas: Vec<f64> = nonzero_eigenvalues(lambdas)
        .into_iter()
        .take(p)
        .map(|l| s2 / (s2 + a2 * l))
        .collect();
    betas.resize(p.max(betas.len()), 1.0);
    betas
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundConfig {
    pub alpha: f64,
    pub sigma: f64,
    #[serde(default = "default_delta")]
    pub delta_conf: f64,
    pub n_q: usize,
}

fn default_delta() -> f64 {
    DEFAULT_DELTA
}

impl BoundConfig {
    pub fn new(alpha: f64, sigma: f64, n_q: usize) -> Self {
        Self {
            alpha,
            sigma,
            delta_conf: DEFAULT_DELTA,
            n_q,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let pos = |v: f64| v > 0.0 && v.is_finite();
        if !pos(self.alpha) || !pos(self.sigma) {
            return Err(Error::InvalidArgument("alpha and sigma must be positive".into()));
        }
        if !(self.delta_conf > 0.0 && self.delta_conf <= 1.0) {
            return Err(Error::InvalidArgument(format!("delta must lie in (0, 1], got {}", self.delta_conf)));
        }
        if self.n_q == 0 {
            return Err(Error::InvalidArgument("n_q must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveMethod {
    #[default]
    Direct,
    Iterative,
}

fn check_residual<T: Scalar>(rows: usize, residual: &[T]) -> Result<()> {
    if residual.len() != rows {
        return Err(Error::Shape(format!(
            "residual has {} entries, jacobian has {rows} rows",
            residual.len()
        )));
    }
    Ok(())
}

/// Posterior mean `μ_Q = (I/α² + JᵀJ/σ²)⁻¹ Jᵀ r / σ²`.
pub fn solve_mu_q<T: Scalar>(
    j: &JacobianMatrix<T>,
    residual: &[T],
    alpha: f64,
    sigma: f64,
    method: SolveMethod,
) -> Result<Vec<T>> {
    check_residual(j.n_rows(), residual)?;
    let lambda = T::lit((sigma / alpha).powi(2));
    match method {
        SolveMethod::Direct => Ok(Ridge::new(&j.values, lambda)?.solve(residual)),
        SolveMethod::Iterative => solve_mu_q_matrix_free(j, residual, alpha, sigma, CG_TOLERANCE, 10 * j.n_params() + 100),
    }
}

/// Conjugate gradient on `(σ²/α² I + JᵀJ) μ = Jᵀ r` through Jacobian
/// products only.
pub fn solve_mu_q_matrix_free<T: Scalar, J: JacobianOperator<T>>(
    j: &J,
    residual: &[T],
    alpha: f64,
    sigma: f64,
    tol: f64,
    max_iter: usize,
) -> Result<Vec<T>> {
    check_residual(j.n_rows(), residual)?;
    let lambda = T::lit((sigma / alpha).powi(2));
    let n = j.n_samples();
    let rhs = j.vjp(0..n, residual);
    let sol = linalg::conjugate_gradient(
        |v| {
            let jv = j.jvp(0..n, v);
            let mut out = j.vjp(0..n, &jv);
            out.iter_mut().zip(v).for_each(|(o, &vi)| *o += lambda * vi);
            out
        },
        &rhs,
        T::lit(tol),
        max_iter,
    )?;
    Ok(sol.x)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KLBreakdown {
    /// `μᵀμ / 2α²`.
    pub perturbation_term: f64,
    /// `½ Σ h(β_i)`.
    pub sharpness_term: f64,
    pub kl_total: f64,
    pub betas: Vec<f64>,
    /// Number of β different from one.
    pub active_betas: usize,
}

/// KL between the connectivity posterior and the prior `N(0, α²I)`.
pub fn kl_qp<T: Scalar>(mu_q: &[T], lambdas: &[T], alpha: f64, sigma: f64, p: usize) -> KLBreakdown {
    let mu2: f64 = mu_q.iter().map(|m| m.as_f64() * m.as_f64()).sum();
    let perturbation_term = mu2 / (2.0 * alpha * alpha);
    let ratio = (alpha / sigma).powi(2);
    let nonzero = nonzero_eigenvalues(lambdas);
    let active = nonzero.len().min(p);
    let sharpness_term = 0.5 * nonzero.iter().take(p).map(|&l| h_of_ratio(ratio * l)).sum::<f64>();
    KLBreakdown {
        perturbation_term,
        sharpness_term,
        kl_total: perturbation_term + sharpness_term,
        betas: beta_from_eigs(lambdas, alpha, sigma, p),
        active_betas: active,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundKernel {
    Ctk,
    Ntk,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub kernel_kind: BoundKernel,
    pub empirical_err: f64,
    #[serde(default)]
    pub empirical_err_stderr: Option<f64>,
    #[serde(default)]
    pub test_err: Option<f64>,
    #[serde(default)]
    pub test_err_stderr: Option<f64>,
    pub kl_breakdown: KLBreakdown,
    /// `μᵀμ / 4α²N_Q`.
    pub perturbation_share: f64,
    /// `Σ h(β_i) / 4N_Q`.
    pub sharpness_share: f64,
    /// `ln(2√N_Q/δ) / 2N_Q`.
    pub confidence_share: f64,
    /// Square root of the three shares.
    pub complexity_term: f64,
    pub bound_value: f64,
    pub n_q: usize,
    pub delta_conf: f64,
    #[serde(default)]
    pub alpha: Option<f64>,
    #[serde(default)]
    pub sigma: Option<f64>,
    /// Trace of the kernel on S_Q.
    #[serde(default)]
    pub kernel_trace: Option<f64>,
    #[serde(default)]
    pub eigen_method: Option<SpectrumMethod>,
    /// The spectrum was truncated; missing eigenvalues were treated as 0.
    #[serde(default)]
    pub eigen_truncated: bool,
}

pub fn pac_bayes_bound(empirical_err: f64, kl: &KLBreakdown, n_q: usize, delta_conf: f64) -> Result<BoundReport> {
    if !(0.0..=1.0).contains(&empirical_err) {
        return Err(Error::InvalidArgument(format!("empirical error {empirical_err} outside [0, 1]")));
    }
    if n_q == 0 || !(delta_conf > 0.0 && delta_conf <= 1.0) {
        return Err(Error::InvalidArgument("need n_q ≥ 1 and δ ∈ (0, 1]".into()));
    }
    let n = n_q as f64;
    let perturbation_share = kl.perturbation_term / (2.0 * n);
    let sharpness_share = kl.sharpness_term / (2.0 * n);
    let confidence_share = (2.0 * n.sqrt() / delta_conf).ln() / (2.0 * n);
    let complexity_term = (perturbation_share + sharpness_share + confidence_share).sqrt();
    Ok(BoundReport {
        kernel_kind: BoundKernel::Ctk,
        empirical_err,
        empirical_err_stderr: None,
        test_err: None,
        test_err_stderr: None,
        kl_breakdown: kl.clone(),
        perturbation_share,
        sharpness_share,
        confidence_share,
        complexity_term,
        bound_value: empirical_err + complexity_term,
        n_q,
        delta_conf,
        alpha: None,
        sigma: None,
        kernel_trace: None,
        eigen_method: None,
        eigen_truncated: false,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorEstimate {
    pub mean: f64,
    /// Standard error of the mean over samples; 0 for one sample.
    pub stderr: f64,
    pub per_sample: Vec<f64>,
}

/// Fraction of rows whose argmax (ties to the lowest index) differs from
/// the label.
pub fn zero_one_error<T: Scalar>(outputs: &DMatrix<T>, labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let wrong = argmax_rows(outputs).iter().zip(labels).filter(|(a, b)| a != b).count();
    wrong as f64 / labels.len() as f64
}

/// Monte-Carlo 0-1 error of the linearized network over posterior samples
/// given as perturbations in `space`.
pub fn estimate_errors<T: Scalar>(
    samples: &[Vec<T>],
    spec: &NetworkSpec,
    params: &ParamVector<T>,
    norm: &NormState<T>,
    data: &Batch<T>,
    space: Space,
) -> Result<ErrorEstimate> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("at least one posterior sample is required".into()));
    }
    let labels = data.labels();
    let per_sample = samples
        .par_iter()
        .map(|c| Ok(zero_one_error(&linearized_predict(spec, params, norm, c, space, &data.inputs)?, &labels)))
        .collect::<Result<Vec<f64>>>()?;
    let n = per_sample.len() as f64;
    let mean = per_sample.iter().sum::<f64>() / n;
    let stderr = if per_sample.len() > 1 {
        (per_sample.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (n - 1.0) / n).sqrt()
    } else {
        0.0
    };
    Ok(ErrorEstimate { mean, stderr, per_sample })
}

/// Negative log marginal likelihood of `r ~ N(0, α² JJᵀ + σ² I)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleSelection {
    pub alpha: f64,
    pub sigma: f64,
    pub nll: f64,
    pub grid: Vec<(f64, f64, f64)>,
}

pub fn select_prior_scales<T: Scalar>(
    j: &JacobianMatrix<T>,
    residual: &[T],
    alphas: &[f64],
    sigmas: &[f64],
) -> Result<ScaleSelection> {
    check_residual(j.n_rows(), residual)?;
    if alphas.is_empty() || sigmas.is_empty() {
        return Err(Error::InvalidArgument("empty prior-scale grid".into()));
    }
    let k = linalg::gram(&j.values);
    let k64 = DMatrix::from_fn(k.nrows(), k.ncols(), |a, b| k[(a, b)].as_f64());
    let eig = k64.symmetric_eigen();
    let r = DVector::from_iterator(residual.len(), residual.iter().map(|v| v.as_f64()));
    let proj = eig.eigenvectors.transpose() * r;
    let n = residual.len() as f64;
    let mut grid = Vec::with_capacity(alphas.len() * sigmas.len());
    for &a in alphas {
        for &s in sigmas {
            let mut quad = 0.0;
            let mut logdet = 0.0;
            for (i, &l) in eig.eigenvalues.iter().enumerate() {
                let d = a * a * l.max(0.0) + s * s;
                quad += proj[i] * proj[i] / d;
                logdet += d.ln();
            }
            grid.push((a, s, 0.5 * (quad + logdet + n * (2.0 * std::f64::consts::PI).ln())));
        }
    }
    let best = grid
        .iter()
        .copied()
        .filter(|g| g.2.is_finite())
        .min_by(|x, y| x.2.total_cmp(&y.2))
        .ok_or(Error::InvalidArgument("no finite marginal likelihood on the grid".into()))?;
    Ok(ScaleSelection {
        alpha: best.0,
        sigma: best.1,
        nll: best.2,
        grid,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundOptions {
    pub dense_eigen_limit: usize,
    pub lanczos_iters: usize,
    pub error_samples: usize,
    pub seed: u64,
}

impl Default for BoundOptions {
    fn default() -> Self {
        Self {
            dense_eigen_limit: DENSE_EIGEN_LIMIT,
            lanczos_iters: LANCZOS_ITERS,
            error_samples: DEFAULT_ERROR_SAMPLES,
            seed: 0,
        }
    }
}

/// Residual `Y − f(X, θ*)` flattened sample-major.
pub fn residual<T: Scalar>(
    spec: &NetworkSpec,
    params: &ParamVector<T>,
    norm: &NormState<T>,
    data: &Batch<T>,
) -> Result<Vec<T>> {
    let f = forward(spec, params, norm, &data.inputs, StatsMode::Running)?;
    if f.shape() != data.targets.shape() {
        return Err(Error::Shape("targets do not match the network output".into()));
    }
    Ok(flatten_rows(&(&data.targets - f)))
}

#[allow(clippy::too_many_arguments)]
fn bound_pipeline<T: Scalar>(
    space: Space,
    spec: &NetworkSpec,
    params: &ParamVector<T>,
    norm: &NormState<T>,
    s_q: &Batch<T>,
    test: Option<&Batch<T>>,
    cfg: &BoundConfig,
    opts: &BoundOptions,
) -> Result<BoundReport> {
    cfg.validate()?;
    if cfg.n_q != s_q.len() {
        return Err(Error::InvalidArgument(format!(
            "n_q = {} but S_Q has {} samples",
            cfg.n_q,
            s_q.len()
        )));
    }
    let mut j = jacobian_params(spec, params, norm, &s_q.inputs)?;
    if space == Space::Connectivity {
        j = j.to_connectivity(params.as_slice())?;
    }
    let r = residual(spec, params, norm, s_q)?;
    let mu = solve_mu_q(&j, &r, cfg.alpha, cfg.sigma, SolveMethod::Direct)?;

    let nk = j.n_rows();
    let (eigs, method, truncated) = if nk <= opts.dense_eigen_limit {
        (dense_spectrum(&empirical_ntk(&j)).eigenvalues, SpectrumMethod::Dense, false)
    } else {
        let op = NetworkJacobian::new(spec, params, norm, &s_q.inputs, space)?;
        let iters = opts.lanczos_iters.min(nk);
        let s = lanczos_spectrum(&KernelOperator { jacobian: &op }, nk, iters, opts.seed)?;
        (s.eigenvalues, SpectrumMethod::Lanczos, iters < nk)
    };
    let kl = kl_qp(&mu, &eigs, cfg.alpha, cfg.sigma, j.n_params());

    let samples = rto_sample(&j, &r, cfg.alpha, cfg.sigma, opts.seed, opts.error_samples)?;
    let emp = estimate_errors(&samples, spec, params, norm, s_q, space)?;
    let mut report = pac_bayes_bound(emp.mean, &kl, cfg.n_q, cfg.delta_conf)?;
    report.kernel_kind = match space {
        Space::Connectivity => BoundKernel::Ctk,
        Space::Parameter => BoundKernel::Ntk,
    };
    report.empirical_err_stderr = Some(emp.stderr);
    if let Some(t) = test {
        let te = estimate_errors(&samples, spec, params, norm, t, space)?;
        report.test_err = Some(te.mean);
        report.test_err_stderr = Some(te.stderr);
    }
    report.alpha = Some(cfg.alpha);
    report.sigma = Some(cfg.sigma);
    report.kernel_trace = Some(j.values.iter().map(|v| v.as_f64() * v.as_f64()).sum());
    report.eigen_method = Some(method);
    report.eigen_truncated = truncated;
    Ok(report)
}

/// PAC-Bayes-CTK bound on the posterior split `s_q`.
pub fn pac_bayes_ctk_bound<T: Scalar>(
    spec: &NetworkSpec,
    params: &ParamVector<T>,
    norm: &NormState<T>,
    s_q: &Batch<T>,
    test: Option<&Batch<T>>,
    cfg: &BoundConfig,
    opts: &BoundOptions,
) -> Result<BoundReport> {
    bound_pipeline(Space::Connectivity, spec, params, norm, s_q, test, cfg, opts)
}

/// The same pipeline with `J_θ` in place of `J_c`.
pub fn pac_bayes_ntk_bound<T: Scalar>(
    spec: &NetworkSpec,
    params: &ParamVector<T>,
    norm: &NormState<T>,
    s_q: &Batch<T>,
    test: Option<&Batch<T>>,
    cfg: &BoundConfig,
    opts: &BoundOptions,
) -> Result<BoundReport> {
    bound_pipeline(Space::Parameter, spec, params, norm, s_q, test, cfg, opts)
}
