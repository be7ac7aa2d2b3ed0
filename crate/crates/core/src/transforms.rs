//! Function-preserving diagonal rescalings of θ.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::net::{forward, NetworkSpec, NormState, ParamVector, StatsMode};
use crate::{rng, Error, Result, Scalar};
use nalgebra::DMatrix;

/// A catalog transformation. Layers are 1-based.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TransformSpec {
    /// Scales the input edges of hidden unit `(layer, unit)` by γ and its
    /// output edges by 1/γ.
    ActivationRescale { layer: usize, unit: usize, gamma: f64 },
    /// Scales row k of the weights and bias preceding a normalized layer by
    /// `gamma[k]`, together with the frozen statistics.
    NormScale { layer: usize, gamma: Vec<f64> },
    /// Shrinks every scale-invariant coordinate by γ.
    WeightDecayScale { gamma: f64 },
}

impl TransformSpec {
    pub fn identity() -> Self {
        TransformSpec::WeightDecayScale { gamma: 1.0 }
    }

    pub fn validate(&self, spec: &NetworkSpec) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidTransform(msg));
        let positive = |g: f64| g > 0.0 && g.is_finite();
        match self {
            TransformSpec::ActivationRescale { layer, unit, gamma } => {
                if !positive(*gamma) {
                    return bad(format!("gamma must be positive, got {gamma}"));
                }
                if *layer == 0 || *layer >= spec.depth() {
                    return bad(format!("activation rescale needs a hidden layer, got {layer}"));
                }
                if *unit >= spec.fan_out(*layer) {
                    return bad(format!("layer {layer} has no unit {unit}"));
                }
                if !spec.activation.is_positively_homogeneous() {
                    return bad(format!("{:?} is not positively homogeneous", spec.activation));
                }
            }
            TransformSpec::NormScale { layer, gamma } => {
                if !spec.is_normalized(*layer) {
                    return bad(format!("layer {layer} has no normalization"));
                }
                if gamma.len() != spec.fan_out(*layer) {
                    return bad(format!(
                        "layer {layer} needs {} factors, got {}",
                        spec.fan_out(*layer),
                        gamma.len()
                    ));
                }
                if let Some(g) = gamma.iter().find(|g| !positive(**g)) {
                    return bad(format!("gamma must be positive, got {g}"));
                }
            }
            TransformSpec::WeightDecayScale { gamma } => {
                if !(positive(*gamma) && *gamma <= 1.0) {
                    return bad(format!("weight decay factor must lie in (0, 1], got {gamma}"));
                }
            }
        }
        Ok(())
    }
}

/// Parameters that feed a normalization layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScaleInvariantMask {
    pub mask: Vec<bool>,
}

impl ScaleInvariantMask {
    pub fn as_slice(&self) -> &[bool] {
        &self.mask
    }

    pub fn count(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }

    pub fn is_all_false(&self) -> bool {
        self.count() == 0
    }
}

pub fn scale_invariant_mask(spec: &NetworkSpec) -> ScaleInvariantMask {
    let layout = crate::net::ParamLayout::new(spec);
    let mut mask = vec![false; layout.len()];
    for &l in &spec.normalize_after {
        let b = layout.layer(l);
        for m in &mut mask[b.weight..b.bias + b.fan_out] {
            *m = true;
        }
    }
    ScaleInvariantMask { mask }
}

fn scale_norm_unit<T: Scalar>(
    spec: &NetworkSpec,
    theta: &mut [T],
    norm: &mut NormState<T>,
    layer: usize,
    unit: usize,
    gamma: T,
) -> Result<()> {
    let b = *crate::net::ParamLayout::new(spec).layer(layer);
    for i in 0..b.fan_in {
        theta[b.weight_index(unit, i)] *= gamma;
    }
    theta[b.bias + unit] *= gamma;
    let eps = norm.epsilon;
    let st = norm
        .layers
        .get_mut(&layer)
        .ok_or_else(|| Error::Shape(format!("missing statistics for layer {layer}")))?;
    st.running_mean[unit] *= gamma;
    // (γz − γm)/√(v' + ε) equals (z − m)/√(v + ε) iff v' = γ²(v + ε) − ε.
    let var = gamma * gamma * (st.running_var[unit] + eps) - eps;
    if !(var > T::zero()) {
        return Err(Error::InvalidTransform(format!(
            "scaling unit {unit} of layer {layer} leaves a non-positive running variance"
        )));
    }
    st.running_var[unit] = var;
    Ok(())
}

pub fn apply_transform<T: Scalar>(
    params: &ParamVector<T>,
    norm: &NormState<T>,
    spec: &NetworkSpec,
    t: &TransformSpec,
) -> Result<(ParamVector<T>, NormState<T>)> {
    t.validate(spec)?;
    norm.validate(spec)?;
    if params.len() != spec.param_count() {
        return Err(Error::Shape(format!(
            "parameter vector has {} entries, spec implies {}",
            params.len(),
            spec.param_count()
        )));
    }
    let mut theta = params.values.clone();
    let mut stats = norm.clone();
    let layout = params.layout();
    match t {
        TransformSpec::ActivationRescale { layer, unit, gamma } => {
            let (l, k) = (*layer, *unit);
            let g = T::lit(*gamma);
            let b = layout.layer(l);
            match (b.gain, b.shift) {
                // Normalized unit: its output is set by gain and shift.
                (Some(gain), Some(shift)) => {
                    theta[gain + k] *= g;
                    theta[shift + k] *= g;
                }
                _ => {
                    for i in 0..b.fan_in {
                        theta[b.weight_index(k, i)] *= g;
                    }
                    theta[b.bias + k] *= g;
                }
            }
            let next = layout.layer(l + 1);
            for o in 0..next.fan_out {
                theta[next.weight_index(o, k)] /= g;
            }
        }
        TransformSpec::NormScale { layer, gamma } => {
            for (k, &g) in gamma.iter().enumerate() {
                scale_norm_unit(spec, &mut theta, &mut stats, *layer, k, T::lit(g))?;
            }
        }
        TransformSpec::WeightDecayScale { gamma } => {
            let g = T::lit(*gamma);
            for &l in &spec.normalize_after {
                for k in 0..spec.fan_out(l) {
                    scale_norm_unit(spec, &mut theta, &mut stats, l, k, g)?;
                }
            }
        }
    }
    Ok((params.with_values(theta), stats))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PreservationReport {
    pub max_abs_gap: f64,
    pub pass: bool,
}

/// Largest output change caused by `t` on the probe inputs, with frozen
/// statistics.
pub fn verify_function_preserving<T: Scalar>(
    spec: &NetworkSpec,
    params: &ParamVector<T>,
    norm: &NormState<T>,
    t: &TransformSpec,
    x_probe: &DMatrix<T>,
    tol: f64,
) -> Result<PreservationReport> {
    if x_probe.nrows() == 0 {
        return Err(Error::InvalidArgument("probe set is empty".into()));
    }
    let (p2, n2) = apply_transform(params, norm, spec, t)?;
    let before = forward(spec, params, norm, x_probe, StatsMode::Running)?;
    let after = forward(spec, &p2, &n2, x_probe, StatsMode::Running)?;
    let max_abs_gap = (before - after).iter().fold(0.0f64, |m, v| m.max(v.as_f64().abs()));
    Ok(PreservationReport {
        max_abs_gap,
        pass: max_abs_gap <= tol,
    })
}

/// Draws a valid catalog transform for `spec`, or `None` when the
/// architecture admits none besides the identity.
pub fn random_transform(spec: &NetworkSpec, seed: u64) -> Option<TransformSpec> {
    let mut r = rng::seeded(seed);
    let mut kinds = Vec::new();
    if spec.activation.is_positively_homogeneous() && spec.depth() > 1 {
        kinds.push(0);
    }
    if !spec.normalize_after.is_empty() {
        kinds.push(1);
        kinds.push(2);
    }
    if kinds.is_empty() {
        return None;
    }
    let log_gamma = |r: &mut rand_chacha::ChaCha8Rng| r.random_range(-1.0f64..1.0).exp();
    Some(match kinds[r.random_range(0..kinds.len())] {
        0 => {
            let layer = r.random_range(1..spec.depth());
            let unit = r.random_range(0..spec.fan_out(layer));
            TransformSpec::ActivationRescale {
                layer,
                unit,
                gamma: log_gamma(&mut r),
            }
        }
        1 => {
            let layers: Vec<usize> = spec.normalize_after.iter().copied().collect();
            let layer = layers[r.random_range(0..layers.len())];
            TransformSpec::NormScale {
                layer,
                gamma: (0..spec.fan_out(layer)).map(|_| log_gamma(&mut r)).collect(),
            }
        }
        _ => TransformSpec::WeightDecayScale {
            gamma: r.random_range(0.2..1.0),
        },
    })
}

/// Standard-Gaussian probe inputs for preservation checks.
pub fn gaussian_probes<T: Scalar>(spec: &NetworkSpec, n: usize, seed: u64) -> DMatrix<T> {
    let mut r = rng::seeded(seed);
    let d = spec.input_dim();
    DMatrix::from_vec(n, d, rng::normal_vec(&mut r, n * d, T::one()))
}
