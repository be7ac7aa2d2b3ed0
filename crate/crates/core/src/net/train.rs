//! Reference minibatch SGD with momentum, weight decay and a warmup +
//! cosine learning-rate schedule. Normalized layers use batch statistics
//! here and keep an exponential moving average for evaluation.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::batch::{Batch, SplitTag};
use super::model::{backward, check_inputs, forward_trace, StatsMode};
use super::loss::{squared_loss, squared_loss_grad};
use super::norm::NormState;
use super::params::ParamVector;
use super::spec::NetworkSpec;
use crate::{rng, Error, Result, Scalar};

fn default_norm_momentum() -> f64 {
    0.1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(default)]
    pub weight_decay: f64,
    /// Fraction of all steps spent in linear warmup.
    #[serde(default)]
    pub cosine_warmup_frac: f64,
    pub seed: u64,
    /// EMA factor for running statistics.
    #[serde(default = "default_norm_momentum")]
    pub norm_momentum: f64,
    /// Hard cap on optimizer steps.
    #[serde(default)]
    pub max_steps: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.1,
            momentum: 0.9,
            epochs: 100,
            batch_size: 32,
            weight_decay: 0.0,
            cosine_warmup_frac: 0.1,
            seed: 0,
            norm_momentum: default_norm_momentum(),
            max_steps: None,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidArgument(format!("train config: {what}")));
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("lr must be non-negative");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(0.0..=1.0).contains(&self.cosine_warmup_frac) {
            return bad("cosine_warmup_frac must lie in [0, 1]");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay must be non-negative");
        }
        if !(0.0..=1.0).contains(&self.norm_momentum) {
            return bad("norm_momentum must lie in [0, 1]");
        }
        Ok(())
    }

    /// Learning rate at `step` of `total`.
    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        let warmup = (self.cosine_warmup_frac * total as f64).round() as usize;
        if step < warmup {
            return self.lr * (step + 1) as f64 / warmup as f64;
        }
        let span = total.saturating_sub(warmup).max(1);
        let progress = (step - warmup) as f64 / span as f64;
        0.5 * self.lr * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// Trains θ on `data` and returns the pre-trained parameters and the
/// updated running statistics.
pub fn train_sgd<T: Scalar>(
    spec: &NetworkSpec,
    params: &ParamVector<T>,
    norm: &NormState<T>,
    data: &Batch<T>,
    hyper: &TrainConfig,
) -> Result<(ParamVector<T>, NormState<T>)> {
    hyper.validate()?;
    if data.split_tag != SplitTag::Prior {
        return Err(Error::InvalidArgument(
            "pre-training must use the S_P split".into(),
        ));
    }
    check_inputs(spec, params.as_slice(), norm, &data.inputs)?;
    if data.targets.ncols() != spec.output_dim() {
        return Err(Error::Shape(format!(
            "targets have {} columns, network has {} outputs",
            data.targets.ncols(),
            spec.output_dim()
        )));
    }

    let n = data.len();
    let mut theta = params.clone();
    let mut stats = norm.clone();
    if n == 0 || hyper.epochs == 0 || hyper.lr == 0.0 {
        return Ok((theta, stats));
    }

    let has_norm = !spec.normalize_after.is_empty();
    let bs = hyper.batch_size.min(n);
    let batches_per_epoch = n.div_ceil(bs);
    let mut total = hyper.epochs * batches_per_epoch;
    if let Some(cap) = hyper.max_steps {
        total = total.min(cap);
    }

    let mut velocity = vec![T::zero(); theta.len()];
    let momentum = T::lit(hyper.momentum);
    let wd = T::lit(hyper.weight_decay);
    let ema = T::lit(hyper.norm_momentum);
    let mut order: Vec<usize> = (0..n).collect();
    let mut shuffle_rng = rng::seeded(hyper.seed);
    let mut step = 0;

    'outer: for epoch in 0..hyper.epochs {
        order.shuffle(&mut shuffle_rng);
        for chunk in order.chunks(bs) {
            if step >= total {
                break 'outer;
            }
            // Batch statistics of one sample are degenerate.
            if has_norm && chunk.len() < 2 {
                continue;
            }
            let mb = data.select(chunk, SplitTag::Prior);
            let trace = forward_trace(spec, theta.layout(), theta.as_slice(), &stats, &mb.inputs, StatsMode::Batch);
            let loss = squared_loss(&trace.output, &mb.targets)?;
            if !loss.as_f64().is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    step,
                    loss: loss.as_f64(),
                });
            }
            let up = squared_loss_grad(&trace.output, &mb.targets)?;
            let grad = backward(spec, theta.layout(), theta.as_slice(), &trace, &up);
            let lr = T::lit(hyper.lr_at(step, total));
            for ((v, g), th) in velocity.iter_mut().zip(&grad).zip(theta.values.iter_mut()) {
                let g = *g + wd * *th;
                *v = momentum * *v + g;
                *th -= lr * *v;
            }
            if theta.values.iter().any(|v| !v.as_f64().is_finite()) {
                return Err(Error::Divergence {
                    epoch,
                    step,
                    loss: f64::NAN,
                });
            }
            let m = T::count(chunk.len());
            for (&l, st) in stats.layers.iter_mut() {
                let (mean, var) = trace.batch_stats(l).expect("normalized layer cache");
                for j in 0..mean.len() {
                    let unbiased = var[j] * m / (m - T::one());
                    st.running_mean[j] = (T::one() - ema) * st.running_mean[j] + ema * mean[j];
                    st.running_var[j] = (T::one() - ema) * st.running_var[j] + ema * unbiased;
                }
            }
            step += 1;
        }
    }
    Ok((theta, stats))
}

/// Running statistics set to one full-batch pass over `x`, with unbiased
/// variances. Needs at least two rows when the net is normalized.
pub fn estimate_norm_stats<T: Scalar>(
    spec: &NetworkSpec,
    params: &ParamVector<T>,
    norm: &NormState<T>,
    x: &nalgebra::DMatrix<T>,
) -> Result<NormState<T>> {
    check_inputs(spec, params.as_slice(), norm, x)?;
    let mut stats = norm.clone();
    if spec.normalize_after.is_empty() {
        return Ok(stats);
    }
    if x.nrows() < 2 {
        return Err(Error::InvalidArgument("statistics need at least two rows".into()));
    }
    let trace = forward_trace(spec, params.layout(), params.as_slice(), norm, x, StatsMode::Batch);
    let m = T::count(x.nrows());
    for (&l, st) in stats.layers.iter_mut() {
        let (mean, var) = trace.batch_stats(l).expect("normalized layer cache");
        st.running_mean = mean.to_vec();
        st.running_var = var.iter().map(|&v| v * m / (m - T::one())).collect();
    }
    Ok(stats)
}
