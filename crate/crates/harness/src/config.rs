//! Experiment configuration as JSON, with dot-path overrides.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ctk_core::laplace::{Flavor, PredictiveForm};
use ctk_core::net::{Activation, InitScheme, NetworkSpec, TrainConfig};
use ctk_core::transforms::TransformSpec;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::CsvSchema;
use crate::error::{HarnessError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    InvarianceCheck,
    Bound,
    Sharpness,
    Correlate,
    Calibrate,
    WidthSweep,
    PosteriorCheck,
}

impl Task {
    pub const ALL: [Task; 7] = [
        Task::InvarianceCheck,
        Task::Bound,
        Task::Sharpness,
        Task::Correlate,
        Task::Calibrate,
        Task::WidthSweep,
        Task::PosteriorCheck,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Task::InvarianceCheck => "invariance_check",
            Task::Bound => "bound",
            Task::Sharpness => "sharpness",
            Task::Correlate => "correlate",
            Task::Calibrate => "calibrate",
            Task::WidthSweep => "width_sweep",
            Task::PosteriorCheck => "posterior_check",
        }
    }

    fn needs_data(self) -> bool {
        !matches!(self, Task::WidthSweep)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    Csv {
        path: PathBuf,
        #[serde(flatten)]
        schema: CsvSchema,
    },
    SyntheticGap1d {
        n: usize,
        gap: (f64, f64),
        noise: f64,
        #[serde(default = "default_n_test")]
        n_test: usize,
    },
    TwoBlobs {
        n: usize,
        #[serde(default = "default_classes")]
        classes: usize,
        separation: f64,
        #[serde(default = "default_dim")]
        dim: usize,
        /// Held-out points drawn from the same generator.
        #[serde(default)]
        n_test: usize,
    },
}

fn default_n_test() -> usize {
    200
}
fn default_classes() -> usize {
    2
}
fn default_dim() -> usize {
    2
}
fn default_split_ratio() -> f64 {
    0.9
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BoundSettings {
    pub alpha: f64,
    pub sigma: f64,
    pub delta_conf: f64,
    pub error_samples: usize,
    /// Pick α, σ on the grids by marginal likelihood of the S_Q residual.
    pub select_scales: bool,
    pub alpha_grid: Vec<f64>,
    pub sigma_grid: Vec<f64>,
    pub dense_eigen_limit: usize,
    pub lanczos_iters: usize,
}

impl Default for BoundSettings {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            sigma: 0.1,
            delta_conf: ctk_core::pac_bayes::DEFAULT_DELTA,
            error_samples: ctk_core::pac_bayes::DEFAULT_ERROR_SAMPLES,
            select_scales: false,
            alpha_grid: vec![0.01, 0.03, 0.1, 0.3, 1.0],
            sigma_grid: vec![0.03, 0.1, 0.3, 1.0],
            dense_eigen_limit: ctk_core::pac_bayes::DENSE_EIGEN_LIMIT,
            lanczos_iters: ctk_core::pac_bayes::LANCZOS_ITERS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TransformSettings {
    pub list: Vec<TransformSpec>,
    /// Additional random catalog transforms.
    pub random: usize,
    pub probe_points: usize,
    pub preservation_tol: f64,
}

impl Default for TransformSettings {
    fn default() -> Self {
        Self {
            list: Vec::new(),
            random: 20,
            probe_points: 64,
            preservation_tol: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SharpnessSettings {
    pub probes: usize,
    pub batch_size: usize,
}

impl Default for SharpnessSettings {
    fn default() -> Self {
        Self {
            probes: ctk_core::kernels::DEFAULT_PROBES,
            batch_size: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorrelateSettings {
    /// Axis name to values. Recognized axes: depth (hidden layers), width,
    /// lr, weight_decay, batch_size.
    pub axes: BTreeMap<String, Vec<f64>>,
    pub accuracy_threshold: f64,
    pub max_steps: usize,
    pub probes: usize,
}

impl Default for CorrelateSettings {
    fn default() -> Self {
        let mut axes = BTreeMap::new();
        axes.insert("depth".into(), vec![1.0, 2.0, 3.0]);
        axes.insert("width".into(), vec![16.0, 32.0, 64.0]);
        Self {
            axes,
            accuracy_threshold: 0.99,
            max_steps: 2000,
            probes: ctk_core::kernels::DEFAULT_PROBES,
        }
    }
}

pub const CORRELATE_AXES: [&str; 5] = ["depth", "width", "lr", "weight_decay", "batch_size"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CalibrateSettings {
    pub flavor: Flavor,
    pub alpha: f64,
    pub sigma: f64,
    pub ensemble_size: usize,
    /// Defaults by class count when absent.
    pub label_smoothing: Option<f64>,
    pub n_bins: usize,
    pub predictive_form: PredictiveForm,
    /// Out-of-distribution inputs scored by predictive variance.
    pub ood: Option<DataSource>,
}

impl Default for CalibrateSettings {
    fn default() -> Self {
        Self {
            flavor: Flavor::Cl,
            alpha: 1.0,
            sigma: 0.1,
            ensemble_size: 32,
            label_smoothing: None,
            n_bins: ctk_core::metrics::DEFAULT_ECE_BINS,
            predictive_form: PredictiveForm::Exact,
            ood: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WidthSweepSettings {
    pub widths: Vec<usize>,
    pub seeds: usize,
    pub n_samples: usize,
}

impl Default for WidthSweepSettings {
    fn default() -> Self {
        Self {
            widths: vec![32, 64, 128, 256, 512, 1024, 2048],
            seeds: 10,
            n_samples: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PosteriorCheckSettings {
    pub alpha: f64,
    pub sigma: f64,
    pub samples: usize,
}

impl Default for PosteriorCheckSettings {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            sigma: 0.5,
            samples: 10_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub task: Task,
    pub seed: u64,
    #[serde(default)]
    pub output: Option<PathBuf>,
    pub network: NetworkSpec,
    #[serde(default)]
    pub data: Option<DataSource>,
    #[serde(default = "default_split_ratio")]
    pub split_ratio: f64,
    /// Pre-training on S_P; absent means θ stays at initialization and
    /// normalization statistics come from one pass over S_P.
    #[serde(default)]
    pub train: Option<TrainConfig>,
    #[serde(default)]
    pub bound: BoundSettings,
    #[serde(default)]
    pub transforms: TransformSettings,
    #[serde(default)]
    pub sharpness: SharpnessSettings,
    #[serde(default)]
    pub correlate: CorrelateSettings,
    #[serde(default)]
    pub calibrate: CalibrateSettings,
    #[serde(default)]
    pub width_sweep: WidthSweepSettings,
    #[serde(default)]
    pub posterior_check: PosteriorCheckSettings,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Applies `key=value` overrides; values parse as JSON, falling back
    /// to a plain string.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        let mut v = serde_json::to_value(self)?;
        for o in overrides {
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| HarnessError::Config(format!("override `{o}` is not key=value")))?;
            let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            set_path(&mut v, key, value)?;
        }
        serde_json::from_value(v).map_err(|e| HarnessError::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(HarnessError::Config(m));
        self.network.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        if self.task.needs_data() && self.data.is_none() {
            return bad(format!("task {} needs a data source", self.task.name()));
        }
        if !(self.split_ratio > 0.0 && self.split_ratio < 1.0) {
            return bad(format!("split_ratio {} must lie in (0, 1)", self.split_ratio));
        }
        if let Some(d) = &self.data {
            let k = match d {
                DataSource::Csv { schema, .. } => schema.classes.unwrap_or(schema.targets.len()),
                DataSource::SyntheticGap1d { .. } => 1,
                DataSource::TwoBlobs { classes, .. } => *classes,
            };
            if k != self.network.output_dim() {
                return bad(format!("data has {k} targets, network has {} outputs", self.network.output_dim()));
            }
        }
        match self.task {
            Task::Correlate => {
                if let Some(a) = self.correlate.axes.keys().find(|a| !CORRELATE_AXES.contains(&a.as_str())) {
                    return bad(format!("unknown correlate axis `{a}`"));
                }
                if self.train.is_none() {
                    return bad("correlate needs a train section".into());
                }
            }
            Task::Calibrate => {
                if self.calibrate.ensemble_size == 0 || self.calibrate.n_bins == 0 {
                    return bad("calibrate needs ensemble_size and n_bins ≥ 1".into());
                }
            }
            Task::WidthSweep => {
                let s = &self.width_sweep;
                if s.widths.is_empty() || s.seeds == 0 || s.n_samples == 0 {
                    return bad("width_sweep needs widths, seeds and n_samples".into());
                }
                if self.network.layer_widths.len() != 3 {
                    return bad("width_sweep sweeps the hidden width of a one-hidden-layer network".into());
                }
            }
            _ => {}
        }
        Ok(())
    }

    /// Runnable starting point for each task.
    pub fn default_for(task: Task) -> Self {
        let blobs = DataSource::TwoBlobs {
            n: 200,
            classes: 2,
            separation: 6.0,
            dim: 2,
            n_test: 200,
        };
        let gap = DataSource::SyntheticGap1d {
            n: 60,
            gap: (-1.0, 1.0),
            noise: 0.05,
            n_test: 101,
        };
        let relu = |w: Vec<usize>| NetworkSpec::new(w, Activation::Relu, InitScheme::NtkStandardGaussian);
        let train = TrainConfig {
            lr: 0.05,
            momentum: 0.9,
            epochs: 50,
            batch_size: 32,
            weight_decay: 0.0,
            cosine_warmup_frac: 0.1,
            seed: 1,
            norm_momentum: 0.1,
            max_steps: None,
        };
        let (network, data, train) = match task {
            Task::InvarianceCheck => (relu(vec![2, 32, 32, 2]).with_normalization([1, 2]), Some(blobs), None),
            Task::Bound | Task::Sharpness | Task::Calibrate => (relu(vec![2, 32, 2]), Some(blobs), Some(train)),
            Task::Correlate => (
                relu(vec![2, 32, 2]),
                Some(blobs),
                Some(TrainConfig {
                    epochs: 200,
                    ..train
                }),
            ),
            Task::WidthSweep => (relu(vec![16, 32, 1]).with_bias_scale(0.1), None, None),
            Task::PosteriorCheck => (
                NetworkSpec::new(vec![1, 4, 1], Activation::Tanh, InitScheme::NtkStandardGaussian),
                Some(DataSource::SyntheticGap1d {
                    n: 12,
                    gap: (-1.0, 1.0),
                    noise: 0.1,
                    n_test: 11,
                }),
                None,
            ),
        };
        let data = if task == Task::Calibrate { Some(gap) } else { data };
        let network = if task == Task::Calibrate {
            NetworkSpec::new(vec![1, 50, 1], Activation::Tanh, InitScheme::NtkStandardGaussian)
        } else {
            network
        };
        Self {
            task,
            seed: 0,
            output: None,
            network,
            data,
            split_ratio: default_split_ratio(),
            train,
            bound: BoundSettings::default(),
            transforms: TransformSettings::default(),
            sharpness: SharpnessSettings::default(),
            correlate: CorrelateSettings::default(),
            calibrate: CalibrateSettings::default(),
            width_sweep: WidthSweepSettings::default(),
            posterior_check: PosteriorCheckSettings::default(),
        }
    }
}

fn set_path(root: &mut Value, path: &str, value: Value) -> Result<()> {
    let parts: Vec<&str> = path.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(HarnessError::Config(format!("bad override path `{path}`")));
    }
    let mut cur = root;
    for (i, part) in parts.iter().enumerate() {
        let last = i + 1 == parts.len();
        cur = match cur {
            Value::Object(map) => {
                if last {
                    map.insert(part.to_string(), value);
                    return Ok(());
                }
                map.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()))
            }
            Value::Array(items) => {
                let idx: usize = part
                    .parse()
                    .map_err(|_| HarnessError::Config(format!("`{part}` in `{path}` is not an index")))?;
                let len = items.len();
                let slot = items
                    .get_mut(idx)
                    .ok_or_else(|| HarnessError::Config(format!("index {idx} out of range ({len}) in `{path}`")))?;
                if last {
                    *slot = value;
                    return Ok(());
                }
                slot
            }
            // Replace scalars and nulls along the way with objects.
            other => {
                *other = Value::Object(Default::default());
                if let Value::Object(map) = other {
                    if last {
                        map.insert(part.to_string(), value);
                        return Ok(());
                    }
                    map.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()))
                } else {
                    unreachable!()
                }
            }
        };
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        for t in Task::ALL {
            let c = ExperimentConfig::default_for(t);
            c.validate().unwrap();
            let text = serde_json::to_string(&c).unwrap();
            assert_eq!(ExperimentConfig::from_json(&text).unwrap(), c);
        }
    }

    #[test]
    fn overrides() {
        let c = ExperimentConfig::default_for(Task::Bound);
        let o = c
            .with_overrides(&[
                "bound.alpha=0.5".into(),
                "network.layer_widths.1=7".into(),
                "seed=9".into(),
                "data.n=50".into(),
            ])
            .unwrap();
        assert_eq!(o.bound.alpha, 0.5);
        assert_eq!(o.network.layer_widths, vec![2, 7, 2]);
        assert_eq!(o.seed, 9);
        assert!(matches!(o.data, Some(DataSource::TwoBlobs { n: 50, .. })));
        assert!(c.with_overrides(&["bound.alpha".into()]).is_err());
        assert!(c.with_overrides(&["bound.alpha=\"x\"".into()]).is_err());
        assert!(c.with_overrides(&["network.layer_widths.9=1".into()]).is_err());
    }

    #[test]
    fn seed_is_required() {
        let mut v = serde_json::to_value(ExperimentConfig::default_for(Task::Bound)).unwrap();
        v.as_object_mut().unwrap().remove("seed");
        assert!(ExperimentConfig::from_json(&v.to_string()).is_err());
    }

    #[test]
    fn validation_catches_missing_fields() {
        let mut c = ExperimentConfig::default_for(Task::Bound);
        c.data = None;
        assert!(c.validate().is_err());
        let mut c = ExperimentConfig::default_for(Task::Bound);
        c.network.layer_widths = vec![2, 8, 3];
        assert!(c.validate().is_err());
        let mut c = ExperimentConfig::default_for(Task::Correlate);
        c.correlate.axes.insert("dropout".into(), vec![0.1]);
        assert!(c.validate().is_err());
    }

    #[test]
    fn parses_csv_source() {
        let s = r#"{"kind":"csv","path":"d.csv","features":["a"],"targets":["y"]}"#;
        let d: DataSource = serde_json::from_str(s).unwrap();
        assert!(matches!(d, DataSource::Csv { ref schema, .. } if schema.classes.is_none()));
    }
}
