use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    /// Positively homogeneous activations admit unit-wise rescaling.
    pub fn is_positively_homogeneous(self) -> bool {
        matches!(self, Activation::Relu | Activation::Identity)
    }
}

/// Initialization, which also fixes the parameterization.
///
/// `NtkStandardGaussian` draws every weight and bias from N(0, 1) and applies
/// `1/√fan_in` inside the forward pass. `He` is the standard parameterization
/// with weights from N(0, 2/fan_in) and zero biases.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitScheme {
    NtkStandardGaussian,
    He,
}

fn default_bias_scale() -> f64 {
    1.0
}

/// Fully-connected architecture `n_0 → n_1 → … → n_L`.
///
/// Layer `l ∈ 1..=L` maps `n_{l-1}` to `n_l`. Layers below `L` apply the
/// activation; a layer listed in `normalize_after` normalizes its
/// pre-activation before that.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub layer_widths: Vec<usize>,
    pub activation: Activation,
    #[serde(default)]
    pub normalize_after: BTreeSet<usize>,
    pub init_scheme: InitScheme,
    /// Multiplier on every bias inside the forward pass.
    #[serde(default = "default_bias_scale")]
    pub bias_scale: f64,
}

impl NetworkSpec {
    pub fn new(layer_widths: Vec<usize>, activation: Activation, init_scheme: InitScheme) -> Self {
        Self {
            layer_widths,
            activation,
            normalize_after: BTreeSet::new(),
            init_scheme,
            bias_scale: 1.0,
        }
    }

    pub fn with_normalization(mut self, layers: impl IntoIterator<Item = usize>) -> Self {
        self.normalize_after = layers.into_iter().collect();
        self
    }

    pub fn with_bias_scale(mut self, scale: f64) -> Self {
        self.bias_scale = scale;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_widths.len() < 2 {
            return Err(Error::InvalidSpec(format!(
                "need at least input and output widths, got {:?}",
                self.layer_widths
            )));
        }
        if let Some(pos) = self.layer_widths.iter().position(|&w| w == 0) {
            return Err(Error::InvalidSpec(format!("layer width {pos} is zero")));
        }
        let depth = self.depth();
        for &l in &self.normalize_after {
            if l == 0 || l >= depth {
                return Err(Error::InvalidSpec(format!(
                    "normalization index {l} must lie in 1..{depth}"
                )));
            }
        }
        if !(self.bias_scale.is_finite() && self.bias_scale > 0.0) {
            return Err(Error::InvalidSpec(format!(
                "bias_scale must be positive, got {}",
                self.bias_scale
            )));
        }
        Ok(())
    }

    /// Number of weight layers `L`.
    pub fn depth(&self) -> usize {
        self.layer_widths.len() - 1
    }

    pub fn input_dim(&self) -> usize {
        self.layer_widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_widths.last().unwrap()
    }

    pub fn fan_in(&self, layer: usize) -> usize {
        self.layer_widths[layer - 1]
    }

    pub fn fan_out(&self, layer: usize) -> usize {
        self.layer_widths[layer]
    }

    pub fn is_normalized(&self, layer: usize) -> bool {
        self.normalize_after.contains(&layer)
    }

    /// Total parameter count `P`.
    pub fn param_count(&self) -> usize {
        (1..=self.depth())
            .map(|l| {
                let (i, o) = (self.fan_in(l), self.fan_out(l));
                i * o + o + if self.is_normalized(l) { 2 * o } else { 0 }
            })
            .sum()
    }

    /// Forward-pass multiplier on the weights of `layer`.
    pub fn weight_multiplier(&self, layer: usize) -> f64 {
        match self.init_scheme {
            InitScheme::NtkStandardGaussian => 1.0 / (self.fan_in(layer) as f64).sqrt(),
            InitScheme::He => 1.0,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_linear_model() {
        let spec = NetworkSpec::new(vec![1, 1], Activation::Identity, InitScheme::He);
        spec.validate().unwrap();
        assert_eq!(spec.param_count(), 2);
    }

    #[test]
    fn counts_normalized_layers() {
        let spec = NetworkSpec::new(vec![2, 3, 1], Activation::Relu, InitScheme::He)
            .with_normalization([1]);
        assert_eq!(spec.param_count(), 6 + 3 + 6 + 3 + 1);
    }

    #[test]
    fn rejects_bad_specs() {
        let zero = NetworkSpec::new(vec![2, 0, 1], Activation::Relu, InitScheme::He);
        assert!(zero.validate().is_err());
        let norm_out = NetworkSpec::new(vec![2, 3, 1], Activation::Relu, InitScheme::He)
            .with_normalization([2]);
        assert!(norm_out.validate().is_err());
        let short = NetworkSpec::new(vec![2], Activation::Relu, InitScheme::He);
        assert!(short.validate().is_err());
    }

    #[test]
    fn parses_json() {
        let spec: NetworkSpec = serde_json::from_str(
            r#"{"layer_widths":[2,3,1],"activation":"relu","normalize_after":[1],"init_scheme":"he"}"#,
        )
        .unwrap();
        assert_eq!(spec.bias_scale, 1.0);
        assert!(spec.is_normalized(1));
    }
}
