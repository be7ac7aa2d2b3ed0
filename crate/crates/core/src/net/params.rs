use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::spec::{InitScheme, NetworkSpec};
use crate::{rng, Error, Result, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Weight,
    Bias,
    NormGain,
    NormShift,
}

/// What a single coordinate of θ is. `unit` is the output unit of the layer;
/// `input` is the source unit for weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamIndex {
    pub layer: usize,
    pub role: Role,
    pub unit: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub input: Option<usize>,
}

/// Offsets of one layer's blocks inside the flat vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerBlocks {
    pub fan_in: usize,
    pub fan_out: usize,
    /// Row-major `fan_out × fan_in`.
    pub weight: usize,
    pub bias: usize,
    pub gain: Option<usize>,
    pub shift: Option<usize>,
}

impl LayerBlocks {
    pub fn weight_index(&self, unit: usize, input: usize) -> usize {
        self.weight + unit * self.fan_in + input
    }

    pub fn end(&self) -> usize {
        self.shift
            .map(|s| s + self.fan_out)
            .unwrap_or(self.bias + self.fan_out)
    }
}

/// Layout for layers `1..=L`: weights, biases, then gain and shift for
/// normalized layers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamLayout {
    blocks: Vec<LayerBlocks>,
    len: usize,
}

impl ParamLayout {
    pub fn new(spec: &NetworkSpec) -> Self {
        let mut blocks = Vec::with_capacity(spec.depth());
        let mut offset = 0;
        for l in 1..=spec.depth() {
            let (fan_in, fan_out) = (spec.fan_in(l), spec.fan_out(l));
            let weight = offset;
            let bias = weight + fan_in * fan_out;
            let (gain, shift) = if spec.is_normalized(l) {
                (Some(bias + fan_out), Some(bias + 2 * fan_out))
            } else {
                (None, None)
            };
            let b = LayerBlocks {
                fan_in,
                fan_out,
                weight,
                bias,
                gain,
                shift,
            };
            offset = b.end();
            blocks.push(b);
        }
        Self { blocks, len: offset }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Blocks of layer `l` (1-based).
    pub fn layer(&self, l: usize) -> &LayerBlocks {
        &self.blocks[l - 1]
    }

    pub fn entry(&self, j: usize) -> ParamIndex {
        assert!(j < self.len, "coordinate {j} out of range");
        for (i, b) in self.blocks.iter().enumerate() {
            if j >= b.end() {
                continue;
            }
            let layer = i + 1;
            return if j < b.bias {
                let off = j - b.weight;
                ParamIndex {
                    layer,
                    role: Role::Weight,
                    unit: off / b.fan_in,
                    input: Some(off % b.fan_in),
                }
            } else if j < b.bias + b.fan_out {
                ParamIndex {
                    layer,
                    role: Role::Bias,
                    unit: j - b.bias,
                    input: None,
                }
            } else if j < b.bias + 2 * b.fan_out {
                ParamIndex {
                    layer,
                    role: Role::NormGain,
                    unit: j - b.bias - b.fan_out,
                    input: None,
                }
            } else {
                ParamIndex {
                    layer,
                    role: Role::NormShift,
                    unit: j - b.bias - 2 * b.fan_out,
                    input: None,
                }
            };
        }
        unreachable!()
    }

    pub fn index_map(&self) -> Vec<ParamIndex> {
        (0..self.len).map(|j| self.entry(j)).collect()
    }

    /// Inverse of [`ParamLayout::entry`].
    pub fn position(&self, idx: &ParamIndex) -> Option<usize> {
        let b = self.blocks.get(idx.layer.checked_sub(1)?)?;
        if idx.unit >= b.fan_out {
            return None;
        }
        match idx.role {
            Role::Weight => {
                let input = idx.input?;
                (input < b.fan_in).then(|| b.weight_index(idx.unit, input))
            }
            Role::Bias => Some(b.bias + idx.unit),
            Role::NormGain => b.gain.map(|g| g + idx.unit),
            Role::NormShift => b.shift.map(|s| s + idx.unit),
        }
    }
}

/// The flat parameter vector θ together with its layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector<T> {
    pub values: Vec<T>,
    layout: ParamLayout,
}

impl<T: Scalar> ParamVector<T> {
    pub fn from_values(spec: &NetworkSpec, values: Vec<T>) -> Result<Self> {
        let layout = ParamLayout::new(spec);
        if values.len() != layout.len() {
            return Err(Error::Shape(format!(
                "parameter vector has {} entries, spec implies {}",
                values.len(),
                layout.len()
            )));
        }
        Ok(Self { values, layout })
    }

    pub fn zeros(spec: &NetworkSpec) -> Self {
        let layout = ParamLayout::new(spec);
        Self {
            values: vec![T::zero(); layout.len()],
            layout,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn as_slice(&self) -> &[T] {
        &self.values
    }

    pub fn with_values(&self, values: Vec<T>) -> Self {
        assert_eq!(values.len(), self.values.len());
        Self {
            values,
            layout: self.layout.clone(),
        }
    }

    pub fn weights(&self, layer: usize) -> &[T] {
        let b = self.layout.layer(layer);
        &self.values[b.weight..b.bias]
    }

    pub fn biases(&self, layer: usize) -> &[T] {
        let b = self.layout.layer(layer);
        &self.values[b.bias..b.bias + b.fan_out]
    }

    /// Writes `<stem>.bin` (little-endian f64) and `<stem>.json` (index map).
    pub fn save(&self, spec: &NetworkSpec, stem: &Path) -> Result<()> {
        let mut bytes = Vec::with_capacity(self.values.len() * 8);
        for v in &self.values {
            bytes.extend_from_slice(&v.as_f64().to_le_bytes());
        }
        fs::write(stem.with_extension("bin"), bytes)?;
        let sidecar = ParamSidecar {
            spec: spec.clone(),
            count: self.values.len(),
            index_map: self.layout.index_map(),
        };
        fs::write(
            stem.with_extension("json"),
            serde_json::to_string_pretty(&sidecar)?,
        )?;
        Ok(())
    }

    pub fn load(stem: &Path) -> Result<(NetworkSpec, Self)> {
        let sidecar: ParamSidecar = serde_json::from_slice(&fs::read(stem.with_extension("json"))?)?;
        let values = read_f64_le(&stem.with_extension("bin"))?;
        if values.len() != sidecar.count {
            return Err(Error::Shape(format!(
                "binary has {} values, sidecar declares {}",
                values.len(),
                sidecar.count
            )));
        }
        let values = values.into_iter().map(T::lit).collect();
        let params = Self::from_values(&sidecar.spec, values)?;
        if params.layout.index_map() != sidecar.index_map {
            return Err(Error::Shape("sidecar index map does not match spec".into()));
        }
        Ok((sidecar.spec, params))
    }
}

/// Reads a flat little-endian f64 array.
pub fn read_f64_le(path: &Path) -> Result<Vec<f64>> {
    let bytes = fs::read(path)?;
    if bytes.len() % 8 != 0 {
        return Err(Error::Shape(format!(
            "{} is not a whole number of f64 values",
            path.display()
        )));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

pub fn write_f64_le<T: Scalar>(path: &Path, values: impl IntoIterator<Item = T>) -> Result<()> {
    let mut bytes = Vec::new();
    for v in values {
        bytes.extend_from_slice(&v.as_f64().to_le_bytes());
    }
    fs::write(path, bytes)?;
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct ParamSidecar {
    spec: NetworkSpec,
    count: usize,
    index_map: Vec<ParamIndex>,
}

/// Draws θ according to the spec's init scheme; gains start at 1, shifts at 0.
pub fn init_params<T: Scalar>(spec: &NetworkSpec, seed: u64) -> Result<ParamVector<T>> {
    spec.validate()?;
    let mut rng = rng::seeded(seed);
    let mut p = ParamVector::<T>::zeros(spec);
    for l in 1..=spec.depth() {
        let b = *p.layout.layer(l);
        let (w_std, bias_random) = match spec.init_scheme {
            InitScheme::NtkStandardGaussian => (1.0, true),
            InitScheme::He => ((2.0 / b.fan_in as f64).sqrt(), false),
        };
        for j in b.weight..b.bias {
            p.values[j] = rng::standard_normal::<T, _>(&mut rng) * T::lit(w_std);
        }
        if bias_random {
            for j in b.bias..b.bias + b.fan_out {
                p.values[j] = rng::standard_normal(&mut rng);
            }
        }
        if let (Some(g), Some(s)) = (b.gain, b.shift) {
            for u in 0..b.fan_out {
                p.values[g + u] = T::one();
                p.values[s + u] = T::zero();
            }
        }
    }
    Ok(p)
}
