use std::collections::BTreeMap;

use ctk_harness::experiments::run_experiment;
use ctk_harness::{ExperimentConfig, Task};
use serde_json::Value;

fn run(cfg: &ExperimentConfig) -> ctk_harness::Report {
    let r = run_experiment(cfg);
    assert!(r.failure.is_none(), "{:?}", r.failure);
    r
}

fn num(r: &ctk_harness::Report, key: &str) -> f64 {
    r.get_f64(key).unwrap_or_else(|| panic!("missing {key}"))
}

#[test]
fn invariance_check_on_normalized_relu() {
    let cfg = ExperimentConfig::default_for(Task::InvarianceCheck);
    let r = run(&cfg);
    assert_eq!(num(&r, "n_transforms"), 20.0);
    assert!(num(&r, "max_ctk_rel") <= 1e-8);
    assert!(num(&r, "max_output_gap") <= 1e-8);
    assert!(num(&r, "max_bound_rel") <= 1e-6);
    assert_eq!(r.tables["transforms"].rows.len(), 20);
}

#[test]
fn vanishing_prior_scale_leaves_only_the_confidence_term() {
    let cfg = ExperimentConfig::default_for(Task::Bound)
        .with_overrides(&["bound.alpha=1e-7".into()])
        .unwrap();
    let r = run(&cfg);
    let ctk = &r.results["ctk_bound"];
    let kl = ctk["kl_breakdown"]["kl_total"].as_f64().unwrap();
    assert!(kl < 1e-8, "KL {kl}");
    let conf = ctk["confidence_share"].as_f64().unwrap();
    let complexity = ctk["complexity_term"].as_f64().unwrap();
    assert!((complexity - conf.sqrt()).abs() < 1e-8);
    assert!(num(&r, "kl_consistency_gap") <= 1e-10);
}

#[test]
fn bound_reports_are_bit_identical_across_runs() {
    let cfg = ExperimentConfig::default_for(Task::Bound);
    let a = run(&cfg).to_json().unwrap();
    let b = run(&cfg).to_json().unwrap();
    assert_eq!(a, b);
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let c = pool.install(|| run(&cfg).to_json().unwrap());
    assert_eq!(a, c);
}

fn tau_by_enumeration(pairs: &[(f64, f64)]) -> f64 {
    let n = pairs.len();
    let mut s = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            let a = (pairs[i].0 - pairs[j].0).signum() * ((pairs[i].0 != pairs[j].0) as i32 as f64);
            let b = (pairs[i].1 - pairs[j].1).signum() * ((pairs[i].1 != pairs[j].1) as i32 as f64);
            s += a * b;
        }
    }
    s / (n * (n - 1) / 2) as f64
}

#[test]
fn correlate_three_by_three_grid() {
    let cfg = ExperimentConfig::default_for(Task::Correlate)
        .with_overrides(&[
            "correlate.accuracy_threshold=0.0".into(),
            "correlate.max_steps=100".into(),
            "data.n=100".into(),
            "data.n_test=100".into(),
        ])
        .unwrap();
    let r = run(&cfg);
    assert_eq!(num(&r, "n_models"), 9.0);
    let rep = &r.results["cs_correlation"];
    let per_axis = rep["per_axis_tau"].as_object().unwrap();
    assert_eq!(per_axis.len(), 2);
    let psi = rep["psi"].as_f64().unwrap();
    let mean: f64 = per_axis.values().map(|v| v.as_f64().unwrap()).sum::<f64>() / 2.0;
    assert!((psi - mean).abs() < 1e-15);

    // Recompute every per-axis τ from the model table.
    let t = &r.tables["models"];
    let col = |name: &str| -> Vec<f64> { t.column(name).unwrap().iter().map(|v| v.as_f64().unwrap()).collect() };
    let (depth, width, cs, gap) = (col("depth"), col("width"), col("cs"), col("gap"));
    for (axis, other) in [("depth", &width), ("width", &depth)] {
        let mut groups: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
        for i in 0..9 {
            groups.entry(other[i].to_string()).or_default().push((cs[i], gap[i]));
        }
        let taus: Vec<f64> = groups.values().map(|g| tau_by_enumeration(g)).collect();
        let expect = taus.iter().sum::<f64>() / taus.len() as f64;
        assert!((per_axis[axis].as_f64().unwrap() - expect).abs() < 1e-12, "{axis}");
    }
}

#[test]
fn accuracy_filter_is_reported() {
    let cfg = ExperimentConfig::default_for(Task::Correlate)
        .with_overrides(&[
            "correlate.accuracy_threshold=1.01".into(),
            "correlate.max_steps=20".into(),
            "data.n=60".into(),
        ])
        .unwrap();
    let r = run_experiment(&cfg);
    assert_eq!(num(&r, "n_filtered"), 9.0);
    let f = r.failure.unwrap();
    assert_eq!(f.stage, "correlation");
    assert!(!f.numerical);
}

#[test]
fn gap_center_is_more_uncertain_than_training_inputs() {
    let r = run(&ExperimentConfig::default_for(Task::Calibrate));
    assert!(num(&r, "gap_center_std") > num(&r, "train_mean_std"));
    assert_eq!(r.tables["predictive"].rows.len(), 101);
}

#[test]
fn classification_calibration() {
    let cfg = ExperimentConfig::default_for(Task::Bound).with_overrides(&[
        "task=\"calibrate\"".into(),
        "calibrate.ensemble_size=8".into(),
        r#"calibrate.ood={"kind":"two_blobs","n":50,"classes":2,"separation":40.0}"#.into(),
    ]);
    let r = run(&cfg.unwrap());
    let cal = &r.results["calibration"];
    for key in ["nll", "ece", "brier"] {
        assert!(cal[key].as_f64().unwrap().is_finite(), "{key}");
    }
    let auroc = cal["auroc_ood"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&auroc));
    assert_eq!(r.tables["ece_bins"].rows.len(), 15);
    assert_eq!(r.results["label_smoothing"], Value::from(0.01));
}

#[test]
fn posterior_check_matches_closed_form() {
    let r = run(&ExperimentConfig::default_for(Task::PosteriorCheck));
    assert!(num(&r, "n_params") <= 20.0);
    assert!(num(&r, "max_mean_z") <= 4.5);
    assert!(num(&r, "cov_rel_frobenius") <= 0.05);
    assert!(num(&r, "kl_rel_gap") <= 1e-8);
}

#[test]
fn sharpness_estimates_agree() {
    let cfg = ExperimentConfig::default_for(Task::Sharpness)
        .with_overrides(&["sharpness.probes=256".into()])
        .unwrap();
    let r = run(&cfg);
    assert!(num(&r, "cs_z_score").abs() <= 4.0);
    assert!(num(&r, "fisher_trace") >= 0.0);
    assert!(num(&r, "ntk_trace") > 0.0);
}

#[test]
fn small_width_sweep() {
    let cfg = ExperimentConfig::default_for(Task::WidthSweep)
        .with_overrides(&["width_sweep.widths=[16,256]".into(), "width_sweep.seeds=3".into()])
        .unwrap();
    let r = run(&cfg);
    let means = r.results["mean_rel_gap"].as_array().unwrap();
    assert!(means[1].as_f64().unwrap() < means[0].as_f64().unwrap());
}

#[test]
fn stage_failure_leaves_a_partial_report() {
    let cfg = ExperimentConfig::default_for(Task::Bound)
        .with_overrides(&["train.lr=1e9".into(), "train.momentum=0.0".into()])
        .unwrap();
    let r = run_experiment(&cfg);
    let f = r.failure.as_ref().unwrap();
    assert_eq!(f.stage, "fit");
    assert!(f.numerical);
    assert!(r.results.contains_key("data"));
    assert!(r.stages.iter().any(|s| s.name == "data" && s.ok));
}

#[test]
fn csv_source_is_standardized_on_the_prior_split() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.csv");
    let mut text = String::from("a,b,label\n");
    for i in 0..60 {
        let c = i % 2;
        text.push_str(&format!("{},{},{}\n", 10.0 + i as f64 * 0.1 + 5.0 * c as f64, -3.0 + (i as f64).sin(), c));
    }
    std::fs::write(&path, text).unwrap();
    let src = serde_json::json!({"kind": "csv", "path": path, "features": ["a", "b"], "targets": ["label"], "classes": 2});
    let cfg = ExperimentConfig::default_for(Task::Bound)
        .with_overrides(&[format!("data={src}")])
        .unwrap();
    let d = ctk_harness::experiments::prepare_data(&cfg).unwrap();
    let st = d.standardizer.as_ref().unwrap();
    assert!(st.target_mean.is_none());
    for j in 0..2 {
        let c = d.s_p.inputs.column(j);
        assert!((c.sum() / c.len() as f64).abs() <= 1e-12);
    }
    let r = run(&cfg);
    assert!(r.results["data"]["standardization"].is_object());
}
