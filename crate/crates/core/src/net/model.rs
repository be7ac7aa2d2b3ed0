//! Batched forward pass with caches, reverse accumulation and forward-mode
//! tangents. Rows of every matrix are samples.

use nalgebra::{DMatrix, DMatrixView};

use super::norm::NormState;
use super::params::{LayerBlocks, ParamLayout};
use super::spec::{Activation, NetworkSpec};
use crate::{Error, Result, Scalar};

/// Which statistics a normalized layer divides by.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StatsMode {
    Batch,
    Running,
}

pub(crate) struct LayerCache<T: Scalar> {
    input: DMatrix<T>,
    /// (ẑ, 1/√(var+ε), batch mean, biased batch variance)
    norm: Option<NormCache<T>>,
    /// Input to the activation (or the output, for the last layer).
    pre_activation: DMatrix<T>,
}

pub(crate) struct NormCache<T: Scalar> {
    normalized: DMatrix<T>,
    inv_std: Vec<T>,
    pub(crate) batch_mean: Vec<T>,
    pub(crate) batch_var: Vec<T>,
}

pub(crate) struct Trace<T: Scalar> {
    pub(crate) layers: Vec<LayerCache<T>>,
    pub(crate) output: DMatrix<T>,
    pub(crate) mode: StatsMode,
}

impl<T: Scalar> Trace<T> {
    pub(crate) fn batch_stats(&self, layer: usize) -> Option<(&[T], &[T])> {
        self.layers[layer - 1]
            .norm
            .as_ref()
            .map(|n| (n.batch_mean.as_slice(), n.batch_var.as_slice()))
    }
}

fn activate<T: Scalar>(act: Activation, y: T) -> T {
    match act {
        Activation::Relu => {
            if y > T::zero() {
                y
            } else {
                T::zero()
            }
        }
        Activation::Tanh => y.tanh(),
        Activation::Identity => y,
    }
}

/// Derivative at the pre-activation; ReLU uses subgradient 0 at 0.
fn activate_prime<T: Scalar>(act: Activation, y: T) -> T {
    match act {
        Activation::Relu => {
            if y > T::zero() {
                T::one()
            } else {
                T::zero()
            }
        }
        Activation::Tanh => {
            let t = y.tanh();
            T::one() - t * t
        }
        Activation::Identity => T::one(),
    }
}

fn weight_t<'a, T: Scalar>(theta: &'a [T], b: &LayerBlocks) -> DMatrixView<'a, T> {
    // Row-major W (fan_out × fan_in) read column-major is Wᵀ.
    DMatrixView::from_slice(&theta[b.weight..b.bias], b.fan_in, b.fan_out)
}

pub(crate) fn check_inputs<T: Scalar>(
    spec: &NetworkSpec,
    theta: &[T],
    norm: &NormState<T>,
    x: &DMatrix<T>,
) -> Result<()> {
    spec.validate()?;
    if theta.len() != spec.param_count() {
        return Err(Error::Shape(format!(
            "parameter vector has {} entries, spec implies {}",
            theta.len(),
            spec.param_count()
        )));
    }
    if x.ncols() != spec.input_dim() {
        return Err(Error::Shape(format!(
            "inputs have {} columns, network expects {}",
            x.ncols(),
            spec.input_dim()
        )));
    }
    norm.validate(spec)
}

pub(crate) fn forward_trace<T: Scalar>(
    spec: &NetworkSpec,
    layout: &ParamLayout,
    theta: &[T],
    norm: &NormState<T>,
    x: &DMatrix<T>,
    mode: StatsMode,
) -> Trace<T> {
    let rows = x.nrows();
    let beta = T::lit(spec.bias_scale);
    let mut u = x.clone();
    let mut layers = Vec::with_capacity(spec.depth());
    for l in 1..=spec.depth() {
        let b = layout.layer(l);
        let s = T::lit(spec.weight_multiplier(l));
        let mut z = &u * weight_t(theta, b);
        z *= s;
        for (j, mut col) in z.column_iter_mut().enumerate() {
            col.add_scalar_mut(beta * theta[b.bias + j]);
        }
        let mut norm_cache = None;
        let y = if let (Some(g), Some(h)) = (b.gain, b.shift) {
            let (mean, var) = match mode {
                StatsMode::Running => {
                    let st = norm.layer(l).expect("validated");
                    (st.running_mean.clone(), st.running_var.clone())
                }
                StatsMode::Batch => column_moments(&z),
            };
            let inv_std: Vec<T> = var
                .iter()
                .map(|&v| T::one() / (v + norm.epsilon).sqrt())
                .collect();
            let mut zhat = z.clone();
            for (j, mut col) in zhat.column_iter_mut().enumerate() {
                col.add_scalar_mut(-mean[j]);
                col *= inv_std[j];
            }
            let mut y = zhat.clone();
            for (j, mut col) in y.column_iter_mut().enumerate() {
                col *= theta[g + j];
                col.add_scalar_mut(theta[h + j]);
            }
            let (batch_mean, batch_var) = if mode == StatsMode::Batch {
                (mean, var)
            } else {
                (Vec::new(), Vec::new())
            };
            norm_cache = Some(NormCache {
                normalized: zhat,
                inv_std,
                batch_mean,
                batch_var,
            });
            y
        } else {
            z
        };
        let next = if l < spec.depth() {
            y.map(|v| activate(spec.activation, v))
        } else {
            y.clone()
        };
        debug_assert_eq!(next.nrows(), rows);
        layers.push(LayerCache {
            input: std::mem::replace(&mut u, next),
            norm: norm_cache,
            pre_activation: y,
        });
    }
    Trace {
        layers,
        output: u,
        mode,
    }
}

/// Column means and biased variances.
fn column_moments<T: Scalar>(z: &DMatrix<T>) -> (Vec<T>, Vec<T>) {
    let n = T::count(z.nrows());
    let mut means = Vec::with_capacity(z.ncols());
    let mut vars = Vec::with_capacity(z.ncols());
    for col in z.column_iter() {
        let m = col.sum() / n;
        let v = col.iter().fold(T::zero(), |acc, &x| acc + (x - m) * (x - m)) / n;
        means.push(m);
        vars.push(v);
    }
    (means, vars)
}

/// Reverse accumulation of `Σ_b ⟨upstream_b, f(x_b)⟩` with respect to θ.
pub(crate) fn backward<T: Scalar>(
    spec: &NetworkSpec,
    layout: &ParamLayout,
    theta: &[T],
    trace: &Trace<T>,
    upstream: &DMatrix<T>,
) -> Vec<T> {
    let mut grad = vec![T::zero(); layout.len()];
    let beta = T::lit(spec.bias_scale);
    let mut g = upstream.clone();
    for l in (1..=spec.depth()).rev() {
        let b = layout.layer(l);
        let cache = &trace.layers[l - 1];
        if l < spec.depth() {
            let act = spec.activation;
            g.zip_apply(&cache.pre_activation, |gv, y| *gv *= activate_prime(act, y));
        }
        let dz = if let (Some(gain), Some(shift), Some(nc)) = (b.gain, b.shift, cache.norm.as_ref()) {
            for j in 0..b.fan_out {
                let col = g.column(j);
                grad[shift + j] = col.sum();
                grad[gain + j] = col.dot(&nc.normalized.column(j));
            }
            let mut dzhat = g.clone();
            for (j, mut col) in dzhat.column_iter_mut().enumerate() {
                col *= theta[gain + j];
            }
            match trace.mode {
                StatsMode::Running => {
                    for (j, mut col) in dzhat.column_iter_mut().enumerate() {
                        col *= nc.inv_std[j];
                    }
                    dzhat
                }
                StatsMode::Batch => {
                    let n = T::count(dzhat.nrows());
                    let mut dz = dzhat.clone();
                    for j in 0..b.fan_out {
                        let dcol = dzhat.column(j);
                        let zcol = nc.normalized.column(j);
                        let sum_d = dcol.sum();
                        let sum_dz = dcol.dot(&zcol);
                        let scale = nc.inv_std[j] / n;
                        for r in 0..dz.nrows() {
                            dz[(r, j)] = scale * (n * dcol[r] - sum_d - zcol[r] * sum_dz);
                        }
                    }
                    dz
                }
            }
        } else {
            g
        };
        let s = T::lit(spec.weight_multiplier(l));
        let mut dw_t = cache.input.transpose() * &dz;
        dw_t *= s;
        grad[b.weight..b.bias].copy_from_slice(dw_t.as_slice());
        for j in 0..b.fan_out {
            grad[b.bias + j] = beta * dz.column(j).sum();
        }
        if l > 1 {
            let mut prev = &dz * weight_t(theta, b).transpose();
            prev *= s;
            g = prev;
        } else {
            g = dz;
        }
    }
    grad
}

/// Forward-mode tangent: returns `J·tangent` per sample (rows × K), under
/// frozen statistics.
pub(crate) fn tangent<T: Scalar>(
    spec: &NetworkSpec,
    layout: &ParamLayout,
    theta: &[T],
    trace: &Trace<T>,
    dtheta: &[T],
) -> DMatrix<T> {
    debug_assert_eq!(trace.mode, StatsMode::Running);
    let beta = T::lit(spec.bias_scale);
    let rows = trace.output.nrows();
    let mut du: DMatrix<T> = DMatrix::zeros(rows, spec.input_dim());
    for l in 1..=spec.depth() {
        let b = layout.layer(l);
        let cache = &trace.layers[l - 1];
        let s = T::lit(spec.weight_multiplier(l));
        let mut dz = &du * weight_t(theta, b) + &cache.input * weight_t(dtheta, b);
        dz *= s;
        for (j, mut col) in dz.column_iter_mut().enumerate() {
            col.add_scalar_mut(beta * dtheta[b.bias + j]);
        }
        let dy = if let (Some(gain), Some(shift), Some(nc)) = (b.gain, b.shift, cache.norm.as_ref()) {
            let mut dy = dz;
            for j in 0..b.fan_out {
                let scale = theta[gain + j] * nc.inv_std[j];
                let dg = dtheta[gain + j];
                let dh = dtheta[shift + j];
                for r in 0..rows {
                    dy[(r, j)] = scale * dy[(r, j)] + dg * nc.normalized[(r, j)] + dh;
                }
            }
            dy
        } else {
            dz
        };
        du = if l < spec.depth() {
            let act = spec.activation;
            let mut d = dy;
            d.zip_apply(&cache.pre_activation, |dv, y| *dv *= activate_prime(act, y));
            d
        } else {
            dy
        };
    }
    du
}
