//! Task drivers. Every random stream derives from the config seed.

use std::collections::BTreeMap;

use ctk_core::kernels::{
    connectivity_sharpness_hutchinson, dense_spectrum, empirical_ntk, fisher_trace, hutchinson_trace, FisherLoss,
};
use ctk_core::laplace::{
    ensemble_predict, posterior_connectivity, predictive, rto_sample, sample_moments, EnsembleMode, Flavor,
    PredictiveInputs,
};
use ctk_core::metrics::{
    auroc, calibration_report, default_label_smoothing, ece_table, gaussian_nll, granulated_kendall,
    CorrelationRecord,
};
use ctk_core::net::{
    estimate_norm_stats, forward, init_params, jacobian_params, train_sgd, NetworkJacobian, NetworkSpec, NormState,
    Space, StatsMode, TrainConfig, DENSE_JACOBIAN_LIMIT,
};
use ctk_core::pac_bayes::{
    kl_qp, pac_bayes_ctk_bound, pac_bayes_ntk_bound, residual, select_prior_scales, zero_one_error, BoundConfig,
    BoundOptions, BoundReport,
};
use ctk_core::rng::derive_seed;
use ctk_core::transforms::{apply_transform, gaussian_probes, random_transform, verify_function_preserving};
use ctk_core::{Data, Jacobian, Norm, Params};
use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::{DataSource, ExperimentConfig, Task};
use crate::data::{load_csv, make_split, synthetic_gap_1d, two_blobs, Standardizer};
use crate::error::{HarnessError, Result};
use crate::report::{Report, Table};

const DATA_STREAM: u64 = 0;
const SPLIT_STREAM: u64 = 1;
const INIT_STREAM: u64 = 2;
const TEST_STREAM: u64 = 3;
const POSTERIOR_STREAM: u64 = 4;
const PROBE_STREAM: u64 = 5;
const OOD_STREAM: u64 = 6;
const TRANSFORM_STREAM: u64 = 100;
const GRID_STREAM: u64 = 1000;

/// Splits of one data source.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub pool: Data,
    pub s_p: Data,
    pub s_q: Data,
    pub test: Option<Data>,
    pub standardizer: Option<Standardizer>,
    pub gap: Option<(f64, f64)>,
    pub classes: Option<usize>,
}

struct Loaded {
    pool: Data,
    test: Option<Data>,
    gap: Option<(f64, f64)>,
    classes: Option<usize>,
    csv: bool,
}

fn load_source(source: &DataSource, seed: u64) -> Result<Loaded> {
    Ok(match source {
        DataSource::Csv { path, schema } => Loaded {
            pool: load_csv(path, schema)?,
            test: None,
            gap: None,
            classes: schema.classes,
            csv: true,
        },
        DataSource::SyntheticGap1d { n, gap, noise, n_test } => {
            let g = synthetic_gap_1d(*n, *gap, *noise, *n_test, derive_seed(seed, DATA_STREAM))?;
            Loaded {
                pool: g.train,
                test: Some(g.test),
                gap: Some(g.gap),
                classes: None,
                csv: false,
            }
        }
        DataSource::TwoBlobs {
            n,
            classes,
            separation,
            dim,
            n_test,
        } => {
            let pool = two_blobs(*n, *classes, *separation, *dim, derive_seed(seed, DATA_STREAM))?;
            let test = if *n_test > 0 {
                let mut t = two_blobs(*n_test, *classes, *separation, *dim, derive_seed(seed, TEST_STREAM))?;
                t.split_tag = ctk_core::net::SplitTag::Test;
                Some(t)
            } else {
                None
            };
            Loaded {
                pool,
                test,
                gap: None,
                classes: Some(*classes),
                csv: false,
            }
        }
    })
}

/// Loads the configured source and splits it into S_P and S_Q. CSV
/// columns are standardized with S_P statistics.
pub fn prepare_data(cfg: &ExperimentConfig) -> Result<Prepared> {
    let source = cfg
        .data
        .as_ref()
        .ok_or_else(|| HarnessError::Config("no data source".into()))?;
    let l = load_source(source, cfg.seed)?;
    let (s_p, s_q) = make_split(&l.pool, cfg.split_ratio, derive_seed(cfg.seed, SPLIT_STREAM))?;
    if l.csv {
        let st = Standardizer::fit(&s_p, l.classes.is_none());
        return Ok(Prepared {
            pool: st.apply(&l.pool),
            s_p: st.apply(&s_p),
            s_q: st.apply(&s_q),
            test: l.test.map(|t| st.apply(&t)),
            standardizer: Some(st),
            gap: l.gap,
            classes: l.classes,
        });
    }
    Ok(Prepared {
        pool: l.pool,
        s_p,
        s_q,
        test: l.test,
        standardizer: None,
        gap: l.gap,
        classes: l.classes,
    })
}

/// Pre-trains on S_P, or keeps the initialization with statistics from
/// one pass over S_P when no training is configured.
pub fn fit_network(
    spec: &NetworkSpec,
    train: Option<&TrainConfig>,
    s_p: &Data,
    init_seed: u64,
) -> Result<(Params, Norm)> {
    let p0: Params = init_params(spec, init_seed)?;
    let n0 = NormState::identity(spec);
    Ok(match train {
        Some(t) => train_sgd(spec, &p0, &n0, s_p, t)?,
        None => {
            let n = estimate_norm_stats(spec, &p0, &n0, &s_p.inputs)?;
            (p0, n)
        }
    })
}

fn accuracy(spec: &NetworkSpec, p: &Params, n: &Norm, data: &Data) -> Result<f64> {
    let f = forward(spec, p, n, &data.inputs, StatsMode::Running)?;
    Ok(1.0 - zero_one_error(&f, &data.labels()))
}

fn rel_change(new: f64, old: f64) -> f64 {
    let d = (new - old).abs();
    if old != 0.0 {
        d / old.abs()
    } else {
        d
    }
}

fn bound_config(cfg: &ExperimentConfig, n_q: usize) -> BoundConfig {
    BoundConfig {
        alpha: cfg.bound.alpha,
        sigma: cfg.bound.sigma,
        delta_conf: cfg.bound.delta_conf,
        n_q,
    }
}

fn bound_options(cfg: &ExperimentConfig) -> BoundOptions {
    BoundOptions {
        dense_eigen_limit: cfg.bound.dense_eigen_limit,
        lanczos_iters: cfg.bound.lanczos_iters,
        error_samples: cfg.bound.error_samples,
        seed: derive_seed(cfg.seed, POSTERIOR_STREAM),
    }
}

fn to_value(v: impl Serialize) -> Value {
    serde_json::to_value(v).unwrap_or(Value::Null)
}

/// Runs the configured task. Failures end the run early; the report then
/// carries everything computed so far and the failing stage.
pub fn run_experiment(cfg: &ExperimentConfig) -> Report {
    let mut report = Report::new(cfg);
    let outcome = cfg.validate().and_then(|_| match cfg.task {
        Task::InvarianceCheck => invariance_check(cfg, &mut report),
        Task::Bound => bound(cfg, &mut report),
        Task::Sharpness => sharpness(cfg, &mut report),
        Task::Correlate => correlate(cfg, &mut report),
        Task::Calibrate => calibrate(cfg, &mut report),
        Task::WidthSweep => width_sweep(cfg, &mut report),
        Task::PosteriorCheck => posterior_check(cfg, &mut report),
    });
    if let Err(e) = outcome {
        report.record_failure(&e);
    }
    report
}

fn data_stage(cfg: &ExperimentConfig, report: &mut Report) -> Result<Prepared> {
    let d = report.stage("data", || prepare_data(cfg))?;
    report.set(
        "data",
        json!({
            "n_prior": d.s_p.len(),
            "n_posterior": d.s_q.len(),
            "n_test": d.test.as_ref().map(|t| t.len()),
            "classes": d.classes,
            "standardization": d.standardizer,
        }),
    );
    Ok(d)
}

fn fit_stage(cfg: &ExperimentConfig, report: &mut Report, d: &Prepared) -> Result<(Params, Norm)> {
    let (p, n) = report.stage("fit", || {
        fit_network(&cfg.network, cfg.train.as_ref(), &d.s_p, derive_seed(cfg.seed, INIT_STREAM))
    })?;
    if d.classes.is_some() {
        let acc = report.stage("train_accuracy", || accuracy(&cfg.network, &p, &n, &d.s_p))?;
        report.set("train_accuracy", acc);
    }
    Ok((p, n))
}

fn invariance_check(cfg: &ExperimentConfig, report: &mut Report) -> Result<()> {
    let spec = &cfg.network;
    let d = data_stage(cfg, report)?;
    let (p, n) = fit_stage(cfg, report, &d)?;
    let transforms = report.stage("transforms", || {
        let mut list = cfg.transforms.list.clone();
        for i in 0..cfg.transforms.random {
            match random_transform(spec, derive_seed(cfg.seed, TRANSFORM_STREAM + i as u64)) {
                Some(t) => list.push(t),
                None => return Err(HarnessError::Config("the network admits no catalog transforms".into())),
            }
        }
        for t in &list {
            t.validate(spec)?;
        }
        Ok(list)
    })?;
    let probes = gaussian_probes::<f64>(spec, cfg.transforms.probe_points, derive_seed(cfg.seed, PROBE_STREAM));
    let bc = bound_config(cfg, d.s_q.len());
    let opts = bound_options(cfg);
    let kernel = |pp: &Params, nn: &Norm| -> Result<ctk_core::Kernel> {
        let j = jacobian_params(spec, pp, nn, &d.s_q.inputs)?.to_connectivity(pp.as_slice())?;
        Ok(empirical_ntk(&j))
    };
    let bounds = |pp: &Params, nn: &Norm| -> Result<(BoundReport, BoundReport)> {
        Ok((
            pac_bayes_ctk_bound(spec, pp, nn, &d.s_q, None, &bc, &opts)?,
            pac_bayes_ntk_bound(spec, pp, nn, &d.s_q, None, &bc, &opts)?,
        ))
    };
    let (c0, (b0, ntk0)) = report.stage("baseline", || Ok((kernel(&p, &n)?, bounds(&p, &n)?)))?;
    report.set("baseline_ctk_bound", &b0);
    report.set("baseline_ntk_bound", &ntk0);

    let rows = report.stage("compare", || {
        transforms
            .par_iter()
            .map(|t| -> Result<Vec<f64>> {
                let (p2, n2) = apply_transform(&p, &n, spec, t)?;
                let pres = verify_function_preserving(spec, &p, &n, t, &probes, cfg.transforms.preservation_tol)?;
                let c1 = kernel(&p2, &n2)?;
                let (b1, ntk1) = bounds(&p2, &n2)?;
                let k = &b1.kl_breakdown;
                let k0 = &b0.kl_breakdown;
                Ok(vec![
                    pres.max_abs_gap,
                    c1.rel_frobenius_to(&c0),
                    rel_change(k.perturbation_term, k0.perturbation_term),
                    rel_change(k.sharpness_term, k0.sharpness_term),
                    rel_change(k.kl_total, k0.kl_total),
                    rel_change(b1.bound_value, b0.bound_value),
                    rel_change(ntk1.kl_breakdown.sharpness_term, ntk0.kl_breakdown.sharpness_term),
                    rel_change(ntk1.bound_value, ntk0.bound_value),
                ])
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let names = [
        "output_gap",
        "ctk_rel",
        "perturbation_rel",
        "sharpness_rel",
        "kl_rel",
        "bound_rel",
        "ntk_sharpness_rel",
        "ntk_bound_rel",
    ];
    let mut cols = vec!["transform", "kind"];
    cols.extend(names);
    let mut table = Table::new(&cols);
    for (i, (t, r)) in transforms.iter().zip(&rows).enumerate() {
        let kind = to_value(t)["kind"].clone();
        let mut row = vec![json!(i), kind];
        row.extend(r.iter().map(|v| json!(v)));
        table.push(row);
    }
    for (j, name) in names.iter().enumerate() {
        let max = rows.iter().map(|r| r[j]).fold(0.0f64, f64::max);
        report.set(&format!("max_{name}"), max);
    }
    report.set("n_transforms", transforms.len());
    report.set("transforms", &transforms);
    report.tables.insert("transforms".into(), table);
    Ok(())
}

fn bound(cfg: &ExperimentConfig, report: &mut Report) -> Result<()> {
    let spec = &cfg.network;
    let d = data_stage(cfg, report)?;
    if d.classes.is_none() {
        return Err(HarnessError::Config("the bound task needs a classification source".into()));
    }
    let (p, n) = fit_stage(cfg, report, &d)?;
    let mut bc = bound_config(cfg, d.s_q.len());
    if cfg.bound.select_scales {
        let sel = report.stage("scale_selection", || {
            let j = jacobian_params(spec, &p, &n, &d.s_q.inputs)?.to_connectivity(p.as_slice())?;
            let r = residual(spec, &p, &n, &d.s_q)?;
            Ok(select_prior_scales(&j, &r, &cfg.bound.alpha_grid, &cfg.bound.sigma_grid)?)
        })?;
        bc.alpha = sel.alpha;
        bc.sigma = sel.sigma;
        report.set("scale_selection", &sel);
    }
    let opts = bound_options(cfg);
    let test = d.test.as_ref();
    let ctk = report.stage("ctk_bound", || Ok(pac_bayes_ctk_bound(spec, &p, &n, &d.s_q, test, &bc, &opts)?))?;
    let k = &ctk.kl_breakdown;
    report.set("kl_consistency_gap", (k.kl_total - (k.perturbation_term + k.sharpness_term)).abs());
    report.set("ctk_bound", &ctk);
    let ntk = report.stage("ntk_bound", || Ok(pac_bayes_ntk_bound(spec, &p, &n, &d.s_q, test, &bc, &opts)?))?;
    report.set("ntk_bound", &ntk);
    Ok(())
}

/// Exact trace of `J Jᵀ` when the dense Jacobian fits in memory.
fn dense_trace(spec: &NetworkSpec, p: &Params, n: &Norm, data: &Data, space: Space) -> Result<Option<f64>> {
    if data.len() * spec.output_dim() * p.len() > DENSE_JACOBIAN_LIMIT {
        return Ok(None);
    }
    let j: Jacobian = jacobian_params(spec, p, n, &data.inputs)?;
    let j = match space {
        Space::Connectivity => j.to_connectivity(p.as_slice())?,
        Space::Parameter => j,
    };
    Ok(Some(j.values.iter().map(|v| v * v).sum()))
}

fn sharpness(cfg: &ExperimentConfig, report: &mut Report) -> Result<()> {
    let spec = &cfg.network;
    let d = data_stage(cfg, report)?;
    let (p, n) = fit_stage(cfg, report, &d)?;
    let s = &cfg.sharpness;
    let seed = derive_seed(cfg.seed, PROBE_STREAM);
    let exact = report.stage("cs_exact", || dense_trace(spec, &p, &n, &d.s_p, Space::Connectivity))?;
    report.set("cs_exact", exact);
    let est = report.stage("cs_hutchinson", || {
        Ok(connectivity_sharpness_hutchinson(spec, &p, &n, &d.s_p, s.probes, s.batch_size, seed)?)
    })?;
    report.set("cs_hutchinson", est.value);
    report.set("cs_hutchinson_stderr", est.standard_error);
    report.set("cs_probes", est.probes);
    if let Some(e) = exact {
        report.set("cs_z_score", (est.value - e) / est.standard_error);
    }
    let fisher = report.stage("fisher_trace", || Ok(fisher_trace(spec, &p, &n, &d.s_p, FisherLoss::Squared)?))?;
    report.set("fisher_trace", fisher);
    let ntk = report.stage("ntk_trace", || {
        if let Some(t) = dense_trace(spec, &p, &n, &d.s_p, Space::Parameter)? {
            return Ok(t);
        }
        let op = NetworkJacobian::new(spec, &p, &n, &d.s_p.inputs, Space::Parameter)?;
        Ok(hutchinson_trace(&op, s.probes, s.batch_size, seed)?.value)
    })?;
    report.set("ntk_trace", ntk);
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
struct GridModel {
    index: usize,
    hyperparams: BTreeMap<String, f64>,
    train_accuracy: f64,
    test_error: f64,
    gap: f64,
    cs: f64,
    ntk_trace: f64,
}

fn grid_points(axes: &BTreeMap<String, Vec<f64>>) -> Vec<BTreeMap<String, f64>> {
    let mut points = vec![BTreeMap::new()];
    for (name, values) in axes {
        points = points
            .into_iter()
            .flat_map(|pt| {
                values.iter().map(move |&v| {
                    let mut q = pt.clone();
                    q.insert(name.clone(), v);
                    q
                })
            })
            .collect();
    }
    points
}

fn grid_variant(
    base: &NetworkSpec,
    train: &TrainConfig,
    hp: &BTreeMap<String, f64>,
    max_steps: usize,
    seed: u64,
) -> Result<(NetworkSpec, TrainConfig)> {
    let w = &base.layer_widths;
    let depth = hp.get("depth").map_or(w.len() - 2, |&v| v as usize);
    let width = hp.get("width").map_or_else(|| w.get(1).copied().unwrap_or(1), |&v| v as usize);
    if depth == 0 || width == 0 {
        return Err(HarnessError::Config("grid depth and width must be positive".into()));
    }
    let mut widths = vec![w[0]];
    widths.extend(std::iter::repeat_n(width, depth));
    widths.push(*w.last().expect("validated widths"));
    let mut spec = base.clone();
    spec.layer_widths = widths;
    if !base.normalize_after.is_empty() {
        spec.normalize_after = (1..=depth).collect();
    }
    let mut t = train.clone();
    if let Some(&v) = hp.get("lr") {
        t.lr = v;
    }
    if let Some(&v) = hp.get("weight_decay") {
        t.weight_decay = v;
    }
    if let Some(&v) = hp.get("batch_size") {
        t.batch_size = v as usize;
    }
    t.max_steps = Some(t.max_steps.map_or(max_steps, |m| m.min(max_steps)));
    t.seed = seed;
    Ok((spec, t))
}

fn correlate(cfg: &ExperimentConfig, report: &mut Report) -> Result<()> {
    let d = data_stage(cfg, report)?;
    if d.classes.is_none() {
        return Err(HarnessError::Config("correlate needs a classification source".into()));
    }
    let train = cfg.train.as_ref().expect("validated");
    let s = &cfg.correlate;
    let held_out = d.test.clone().unwrap_or_else(|| d.s_q.clone());
    let points = grid_points(&s.axes);
    let outcomes: Vec<(BTreeMap<String, f64>, std::result::Result<GridModel, String>)> = report.stage("train_grid", || {
        Ok(points
            .par_iter()
            .enumerate()
            .map(|(i, hp)| {
                let seed = derive_seed(cfg.seed, GRID_STREAM + i as u64);
                let run = || -> Result<GridModel> {
                    let (spec, t) = grid_variant(&cfg.network, train, hp, s.max_steps, seed)?;
                    let (p, n) = fit_network(&spec, Some(&t), &d.s_p, seed)?;
                    let train_accuracy = accuracy(&spec, &p, &n, &d.s_p)?;
                    let test_error = 1.0 - accuracy(&spec, &p, &n, &held_out)?;
                    let trace = |space| -> Result<f64> {
                        match dense_trace(&spec, &p, &n, &d.s_p, space)? {
                            Some(v) => Ok(v),
                            None => {
                                let op = NetworkJacobian::new(&spec, &p, &n, &d.s_p.inputs, space)?;
                                Ok(hutchinson_trace(&op, s.probes, 64, seed)?.value)
                            }
                        }
                    };
                    Ok(GridModel {
                        index: i,
                        hyperparams: hp.clone(),
                        train_accuracy,
                        test_error,
                        gap: test_error - (1.0 - train_accuracy),
                        cs: trace(Space::Connectivity)?,
                        ntk_trace: trace(Space::Parameter)?,
                    })
                };
                (hp.clone(), run().map_err(|e| e.to_string()))
            })
            .collect())
    })?;

    let axes: Vec<String> = s.axes.keys().cloned().collect();
    let mut cols = vec!["model"];
    cols.extend(axes.iter().map(String::as_str));
    cols.extend(["train_accuracy", "test_error", "gap", "cs", "ntk_trace", "kept", "error"]);
    let mut table = Table::new(&cols);
    let mut kept = Vec::new();
    let mut failed = 0;
    for (i, (hp, out)) in outcomes.iter().enumerate() {
        let mut row = vec![json!(i)];
        row.extend(axes.iter().map(|a| json!(hp[a])));
        match out {
            Ok(m) => {
                let keep = m.train_accuracy >= s.accuracy_threshold;
                row.extend([
                    json!(m.train_accuracy),
                    json!(m.test_error),
                    json!(m.gap),
                    json!(m.cs),
                    json!(m.ntk_trace),
                    json!(keep),
                    Value::Null,
                ]);
                if keep {
                    kept.push(m.clone());
                }
            }
            Err(e) => {
                failed += 1;
                row.extend([Value::Null, Value::Null, Value::Null, Value::Null, Value::Null, json!(false), json!(e)]);
            }
        }
        table.push(row);
    }
    report.tables.insert("models".into(), table);
    report.set("n_models", outcomes.len());
    report.set("n_failed", failed);
    report.set("n_filtered", outcomes.len() - failed - kept.len());
    report.set("n_kept", kept.len());
    report.set("accuracy_threshold", s.accuracy_threshold);
    report.set("grid_note", "toy grid: axes and ranges are harness choices");

    let records = |measure: fn(&GridModel) -> f64| -> Vec<CorrelationRecord> {
        kept.iter()
            .map(|m| CorrelationRecord {
                hyperparams: m.hyperparams.iter().map(|(k, v)| (k.clone(), format!("{v}"))).collect(),
                measure: measure(m),
                gap: m.gap,
            })
            .collect()
    };
    let cs = report.stage("correlation", || {
        if kept.len() < 2 {
            return Err(HarnessError::Data(format!(
                "{} models passed the accuracy filter; need at least two",
                kept.len()
            )));
        }
        Ok((
            granulated_kendall(&records(|m| m.cs), &axes)?,
            granulated_kendall(&records(|m| m.ntk_trace), &axes)?,
        ))
    })?;
    report.set("cs_correlation", &cs.0);
    report.set("ntk_trace_correlation", &cs.1);
    Ok(())
}

fn calibrate(cfg: &ExperimentConfig, report: &mut Report) -> Result<()> {
    let spec = &cfg.network;
    let c = &cfg.calibrate;
    let d = data_stage(cfg, report)?;
    let (p, n) = fit_stage(cfg, report, &d)?;
    let test = d.test.clone().unwrap_or_else(|| d.s_q.clone());
    report.set("flavor", c.flavor);

    if d.classes.is_none() {
        // Regression: kernel-form predictive on the test inputs.
        let pred = report.stage("predictive", || {
            let jt = jacobian_params(spec, &p, &n, &d.s_p.inputs)?;
            let js = jacobian_params(spec, &p, &n, &test.inputs)?;
            let f = forward(spec, &p, &n, &test.inputs, StatsMode::Running)?;
            let fp = forward(spec, &p, &n, &d.s_p.inputs, StatsMode::Running)?;
            let run = |j: &Jacobian, f: &DMatrix<f64>| {
                let inputs = PredictiveInputs {
                    j_test: j,
                    j_train: &jt,
                    theta: p.as_slice(),
                    f_test: f,
                    mask: None,
                };
                predictive(c.flavor, &inputs, c.alpha, c.sigma, c.predictive_form)
            };
            Ok((run(&js, &f)?, run(&jt, &fp)?))
        })?;
        let (at_test, at_train) = pred;
        let noise = DMatrix::from_element(test.len(), test.targets.ncols(), c.sigma * c.sigma);
        let var = at_test.variances() + noise;
        let nll = report.stage("nll", || Ok(gaussian_nll(&at_test.mean, &var, &test.targets)?))?;
        report.set("gaussian_nll", nll);
        let std_test = at_test.mean_std();
        let std_train = at_train.mean_std();
        let train_mean_std = std_train.iter().sum::<f64>() / std_train.len() as f64;
        report.set("train_mean_std", train_mean_std);
        report.set("jitter", at_test.jitter);
        let mut table = Table::new(&["x", "mean", "std", "target"]);
        for i in 0..test.len() {
            table.push(vec![
                json!(test.inputs[(i, 0)]),
                json!(at_test.mean[(i, 0)]),
                json!(std_test[i]),
                json!(test.targets[(i, 0)]),
            ]);
        }
        report.tables.insert("predictive".into(), table);
        if let Some((lo, hi)) = d.gap {
            let centre = 0.5 * (lo + hi);
            let i = (0..test.len())
                .min_by(|&a, &b| {
                    (test.inputs[(a, 0)] - centre)
                        .abs()
                        .total_cmp(&(test.inputs[(b, 0)] - centre).abs())
                })
                .expect("non-empty test grid");
            report.set("gap_center_std", std_test[i]);
            report.set("gap_std_ratio", std_test[i] / train_mean_std);
        }
        return Ok(());
    }

    // Classification: RTO ensemble around θ*.
    let classes = d.classes.expect("checked");
    let smoothing = c.label_smoothing.unwrap_or_else(|| default_label_smoothing(classes));
    let space = match c.flavor {
        Flavor::Cl => Space::Connectivity,
        Flavor::Ll => Space::Parameter,
    };
    let samples = report.stage("posterior_samples", || {
        let mut j = jacobian_params(spec, &p, &n, &d.s_p.inputs)?;
        if space == Space::Connectivity {
            j = j.to_connectivity(p.as_slice())?;
        }
        let zero = vec![0.0; j.n_rows()];
        Ok(rto_sample(&j, &zero, c.alpha, c.sigma, derive_seed(cfg.seed, POSTERIOR_STREAM), c.ensemble_size)?)
    })?;
    let ens = report.stage("ensemble", || {
        Ok(ensemble_predict(&samples, spec, &p, &n, &test.inputs, space, EnsembleMode::Linearized, smoothing)?)
    })?;
    let ood = match &c.ood {
        Some(src) => Some(report.stage("ood", || {
            let l = load_source(src, derive_seed(cfg.seed, OOD_STREAM))?;
            let x = match &d.standardizer {
                Some(st) => st.apply(&l.pool).inputs,
                None => l.pool.inputs,
            };
            let e = ensemble_predict(&samples, spec, &p, &n, &x, space, EnsembleMode::Linearized, smoothing)?;
            Ok(e.variance)
        })?),
        None => None,
    };
    let labels = test.labels();
    let cal = report.stage("metrics", || {
        let ood_pair = ood.as_ref().map(|o| (ens.variance.as_slice(), o.as_slice()));
        Ok(calibration_report(&ens.probabilities, &labels, c.n_bins, ood_pair)?)
    })?;
    report.set("label_smoothing", smoothing);
    report.set("calibration", &cal);
    if let Some(o) = &ood {
        report.set("auroc_check", auroc(&ens.variance, o)?);
    }
    let bins = ece_table(&ens.probabilities, &labels, c.n_bins)?;
    let mut table = Table::new(&["lower", "upper", "count", "accuracy", "confidence"]);
    for b in bins {
        table.push(vec![json!(b.lower), json!(b.upper), json!(b.count), json!(b.accuracy), json!(b.confidence)]);
    }
    report.tables.insert("ece_bins".into(), table);
    Ok(())
}

/// `‖C − Θ‖_F / ‖Θ‖_F` at initialization.
pub fn kernel_gap(spec: &NetworkSpec, init_seed: u64, x: &DMatrix<f64>) -> Result<f64> {
    let p: Params = init_params(spec, init_seed)?;
    let n = NormState::identity(spec);
    let j = jacobian_params(spec, &p, &n, x)?;
    let ntk = empirical_ntk(&j);
    let ctk = empirical_ntk(&j.to_connectivity(p.as_slice())?);
    Ok(ctk.rel_frobenius_to(&ntk))
}

fn width_sweep(cfg: &ExperimentConfig, report: &mut Report) -> Result<()> {
    let s = &cfg.width_sweep;
    let base = &cfg.network;
    let d_in = base.input_dim();
    let jobs: Vec<(usize, usize)> = s
        .widths
        .iter()
        .flat_map(|&w| (0..s.seeds).map(move |k| (w, k)))
        .collect();
    let gaps = report.stage("kernels", || {
        jobs.par_iter()
            .map(|&(w, k)| {
                let mut spec = base.clone();
                spec.layer_widths[1] = w;
                let x = gaussian_probes::<f64>(&spec, s.n_samples, derive_seed(cfg.seed, PROBE_STREAM + k as u64));
                debug_assert_eq!(x.ncols(), d_in);
                kernel_gap(&spec, derive_seed(cfg.seed, GRID_STREAM + (w * 1000 + k) as u64), &x)
            })
            .collect::<Result<Vec<f64>>>()
    })?;
    let mut table = Table::new(&["width", "seed", "rel_gap"]);
    for (&(w, k), g) in jobs.iter().zip(&gaps) {
        table.push(vec![json!(w), json!(k), json!(g)]);
    }
    let means: Vec<f64> = s
        .widths
        .iter()
        .map(|&w| {
            let vals: Vec<f64> = jobs.iter().zip(&gaps).filter(|(j, _)| j.0 == w).map(|(_, g)| *g).collect();
            vals.iter().sum::<f64>() / vals.len() as f64
        })
        .collect();
    let violations = means.windows(2).filter(|m| m[1] > m[0]).count();
    let mut summary = Table::new(&["width", "mean_rel_gap"]);
    for (w, m) in s.widths.iter().zip(&means) {
        summary.push(vec![json!(w), json!(m)]);
    }
    report.tables.insert("width_sweep".into(), table);
    report.tables.insert("width_sweep_mean".into(), summary);
    report.set("mean_rel_gap", &means);
    report.set("monotone_violations", violations);
    report.set("final_mean_rel_gap", means.last().copied());
    Ok(())
}

/// KL between `N(μ, Σ)` and `N(0, α²I)` from dense matrices.
pub fn dense_gaussian_kl(mu: &[f64], cov: &DMatrix<f64>, alpha: f64) -> Result<f64> {
    let p = mu.len() as f64;
    let a2 = alpha * alpha;
    let chol = cov.clone().cholesky().ok_or(ctk_core::Error::NotPositiveDefinite)?;
    let logdet: f64 = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let mu2: f64 = mu.iter().map(|m| m * m).sum();
    Ok(0.5 * (cov.trace() / a2 + mu2 / a2 - p + p * a2.ln() - logdet))
}

fn posterior_check(cfg: &ExperimentConfig, report: &mut Report) -> Result<()> {
    let spec = &cfg.network;
    let s = &cfg.posterior_check;
    let d = data_stage(cfg, report)?;
    let (p, n) = fit_stage(cfg, report, &d)?;
    let (j, r) = report.stage("jacobian", || {
        let j = jacobian_params(spec, &p, &n, &d.pool.inputs)?.to_connectivity(p.as_slice())?;
        Ok((j, residual(spec, &p, &n, &d.pool)?))
    })?;
    let q = report.stage("closed_form", || Ok(posterior_connectivity(&j, &r, s.alpha, s.sigma)?))?;
    let cov = report.stage("covariance", || Ok(q.covariance_dense()?))?;
    let samples = report.stage("rto", || {
        Ok(rto_sample(&j, &r, s.alpha, s.sigma, derive_seed(cfg.seed, POSTERIOR_STREAM), s.samples)?)
    })?;
    let (mean, scov) = sample_moments(&samples);
    let m = s.samples as f64;
    let max_z = (0..q.dim())
        .map(|i| (mean[i] - q.mean[i]).abs() / (cov[(i, i)] / m).sqrt())
        .fold(0.0f64, f64::max);
    report.set("n_params", q.dim());
    report.set("max_mean_z", max_z);
    report.set("cov_rel_frobenius", ctk_core::linalg::rel_frobenius(&scov, &cov));
    let kl = report.stage("kl", || {
        let eig = dense_spectrum(&empirical_ntk(&j)).eigenvalues;
        let fast = kl_qp(&q.mean, &eig, s.alpha, s.sigma, j.n_params());
        Ok((fast.kl_total, dense_gaussian_kl(&q.mean, &cov, s.alpha)?))
    })?;
    report.set("kl_qp", kl.0);
    report.set("kl_dense", kl.1);
    report.set("kl_rel_gap", rel_change(kl.0, kl.1));
    Ok(())
}
