use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::spec::NetworkSpec;
use crate::{Error, Result, Scalar};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct LayerStats<T> {
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
}

/// Frozen statistics of every normalized layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct NormState<T> {
    pub layers: BTreeMap<usize, LayerStats<T>>,
    pub epsilon: T,
}

pub const DEFAULT_EPSILON: f64 = 1e-5;

impl<T: Scalar> NormState<T> {
    /// Mean 0, variance 1 for every normalized layer.
    pub fn identity(spec: &NetworkSpec) -> Self {
        Self::with_epsilon(spec, T::lit(DEFAULT_EPSILON))
    }

    pub fn with_epsilon(spec: &NetworkSpec, epsilon: T) -> Self {
        let layers = spec
            .normalize_after
            .iter()
            .map(|&l| {
                let n = spec.fan_out(l);
                (
                    l,
                    LayerStats {
                        running_mean: vec![T::zero(); n],
                        running_var: vec![T::one(); n],
                    },
                )
            })
            .collect();
        Self { layers, epsilon }
    }

    pub fn validate(&self, spec: &NetworkSpec) -> Result<()> {
        if !(self.epsilon > T::zero()) {
            return Err(Error::InvalidArgument("normalization epsilon must be positive".into()));
        }
        for &l in &spec.normalize_after {
            let st = self
                .layers
                .get(&l)
                .ok_or_else(|| Error::Shape(format!("missing statistics for layer {l}")))?;
            let n = spec.fan_out(l);
            if st.running_mean.len() != n || st.running_var.len() != n {
                return Err(Error::Shape(format!("statistics of layer {l} must have length {n}")));
            }
            if st.running_var.iter().any(|&v| !(v > T::zero())) {
                return Err(Error::InvalidArgument(format!(
                    "running variance of layer {l} must be positive"
                )));
            }
        }
        Ok(())
    }

    pub fn layer(&self, l: usize) -> Option<&LayerStats<T>> {
        self.layers.get(&l)
    }
}
