//! Calibration scores and rank correlations.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::net::argmax_rows;
use crate::{Error, Result, Scalar};

pub const DEFAULT_ECE_BINS: usize = 15;
const ROW_SUM_TOL: f64 = 1e-6;

fn check_probabilities<T: Scalar>(probs: &DMatrix<T>, labels: &[usize]) -> Result<()> {
    if probs.nrows() != labels.len() {
        return Err(Error::Shape(format!(
            "{} prediction rows for {} labels",
            probs.nrows(),
            labels.len()
        )));
    }
    if probs.nrows() == 0 {
        return Err(Error::InvalidArgument("no predictions".into()));
    }
    let k = probs.ncols();
    for (i, row) in probs.row_iter().enumerate() {
        let s: f64 = row.iter().map(|v| v.as_f64()).sum();
        if (s - 1.0).abs() > ROW_SUM_TOL || row.iter().any(|v| v.as_f64() < 0.0) {
            return Err(Error::InvalidArgument(format!("row {i} is not a probability vector (sum {s})")));
        }
        if labels[i] >= k {
            return Err(Error::InvalidLabel { label: labels[i], classes: k });
        }
    }
    Ok(())
}

/// `−mean log p[label]`.
pub fn nll<T: Scalar>(probs: &DMatrix<T>, labels: &[usize]) -> Result<f64> {
    check_probabilities(probs, labels)?;
    let mut acc = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let p = probs[(i, y)].as_f64();
        if p <= 0.0 {
            return Err(Error::InvalidArgument(format!("zero probability at the label of row {i}")));
        }
        acc -= p.ln();
    }
    Ok(acc / labels.len() as f64)
}

/// Mean Gaussian negative log density over all entries.
pub fn gaussian_nll<T: Scalar>(mean: &DMatrix<T>, variance: &DMatrix<T>, targets: &DMatrix<T>) -> Result<f64> {
    if mean.shape() != variance.shape() || mean.shape() != targets.shape() || mean.is_empty() {
        return Err(Error::Shape("mean, variance and targets must share a non-empty shape".into()));
    }
    let mut acc = 0.0;
    for ((m, v), y) in mean.iter().zip(variance.iter()).zip(targets.iter()) {
        let v = v.as_f64();
        if !(v > 0.0) {
            return Err(Error::InvalidArgument("predictive variance must be positive".into()));
        }
        let d = y.as_f64() - m.as_f64();
        acc += 0.5 * (2.0 * std::f64::consts::PI * v).ln() + d * d / (2.0 * v);
    }
    Ok(acc / mean.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EceBin {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    pub accuracy: f64,
    pub confidence: f64,
}

/// Equal-width bins `(lower, upper]` over max-probability confidence.
pub fn ece_table<T: Scalar>(probs: &DMatrix<T>, labels: &[usize], n_bins: usize) -> Result<Vec<EceBin>> {
    check_probabilities(probs, labels)?;
    if n_bins == 0 {
        return Err(Error::InvalidArgument("n_bins must be at least 1".into()));
    }
    let pred = argmax_rows(probs);
    let mut count = vec![0usize; n_bins];
    let mut correct = vec![0usize; n_bins];
    let mut conf = vec![0.0f64; n_bins];
    for (i, &c) in pred.iter().enumerate() {
        let p = probs[(i, c)].as_f64();
        let b = ((p * n_bins as f64).ceil() as usize).clamp(1, n_bins) - 1;
        count[b] += 1;
        conf[b] += p;
        if c == labels[i] {
            correct[b] += 1;
        }
    }
    Ok((0..n_bins)
        .map(|b| {
            let n = count[b].max(1) as f64;
            EceBin {
                lower: b as f64 / n_bins as f64,
                upper: (b + 1) as f64 / n_bins as f64,
                count: count[b],
                accuracy: if count[b] > 0 { correct[b] as f64 / n } else { 0.0 },
                confidence: if count[b] > 0 { conf[b] / n } else { 0.0 },
            }
        })
        .collect())
}

pub fn ece<T: Scalar>(probs: &DMatrix<T>, labels: &[usize], n_bins: usize) -> Result<f64> {
    let n = labels.len() as f64;
    Ok(ece_table(probs, labels, n_bins)?
        .iter()
        .map(|b| b.count as f64 / n * (b.accuracy - b.confidence).abs())
        .sum())
}

pub fn write_ece_csv(bins: &[EceBin], path: &Path) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "lower,upper,count,accuracy,confidence")?;
    for b in bins {
        writeln!(w, "{},{},{},{},{}", b.lower, b.upper, b.count, b.accuracy, b.confidence)?;
    }
    w.flush()?;
    Ok(())
}

/// Mean `‖p − onehot‖²`.
pub fn brier<T: Scalar>(probs: &DMatrix<T>, labels: &[usize]) -> Result<f64> {
    check_probabilities(probs, labels)?;
    let mut acc = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        for k in 0..probs.ncols() {
            let t = if k == y { 1.0 } else { 0.0 };
            acc += (probs[(i, k)].as_f64() - t).powi(2);
        }
    }
    Ok(acc / labels.len() as f64)
}

/// `P(out > in) + ½ P(out = in)` with out-of-distribution as positives.
pub fn auroc(scores_in: &[f64], scores_out: &[f64]) -> Result<f64> {
    if scores_in.is_empty() || scores_out.is_empty() {
        return Err(Error::InvalidArgument("auroc needs both score sets".into()));
    }
    if scores_in.iter().chain(scores_out).any(|s| s.is_nan()) {
        return Err(Error::InvalidArgument("auroc scores contain NaN".into()));
    }
    let mut all: Vec<(f64, bool)> = scores_in
        .iter()
        .map(|&s| (s, false))
        .chain(scores_out.iter().map(|&s| (s, true)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    // Sum of mid-ranks of the positives.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j + 1 < all.len() && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += mid * all[i..=j].iter().filter(|e| e.1).count() as f64;
        i = j + 1;
    }
    let (n_in, n_out) = (scores_in.len() as f64, scores_out.len() as f64);
    Ok((rank_sum - n_out * (n_out + 1.0) / 2.0) / (n_in * n_out))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub nll: f64,
    pub ece: f64,
    pub brier: f64,
    pub auroc_ood: Option<f64>,
    pub n_bins: usize,
}

pub fn calibration_report<T: Scalar>(
    probs: &DMatrix<T>,
    labels: &[usize],
    n_bins: usize,
    ood_scores: Option<(&[f64], &[f64])>,
) -> Result<CalibrationReport> {
    Ok(CalibrationReport {
        nll: nll(probs, labels)?,
        ece: ece(probs, labels, n_bins)?,
        brier: brier(probs, labels)?,
        auroc_ood: ood_scores.map(|(a, b)| auroc(a, b)).transpose()?,
        n_bins,
    })
}

/// τ-a: `(concordant − discordant) / C(n, 2)`, ties in either argument
/// counting as neither.
pub fn kendall_tau(measure: &[f64], gap: &[f64]) -> Result<f64> {
    if measure.len() != gap.len() {
        return Err(Error::Shape("kendall_tau needs equal lengths".into()));
    }
    let n = measure.len();
    if n < 2 {
        return Err(Error::InvalidArgument("kendall_tau needs at least two points".into()));
    }
    let mut score = 0i64;
    for i in 0..n {
        for j in i + 1..n {
            let a = (measure[i] - measure[j]).partial_cmp(&0.0).map_or(0, |o| o as i64);
            let b = (gap[i] - gap[j]).partial_cmp(&0.0).map_or(0, |o| o as i64);
            score += a * b;
        }
    }
    Ok(score as f64 / (n * (n - 1) / 2) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationRecord {
    pub hyperparams: BTreeMap<String, String>,
    pub measure: f64,
    pub gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AxisSummary {
    pub tau: f64,
    /// Groups with at least two records.
    pub groups: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub overall_tau: f64,
    pub per_axis_tau: BTreeMap<String, f64>,
    pub per_axis: BTreeMap<String, AxisSummary>,
    /// Mean of `per_axis_tau`; NaN when every axis was skipped.
    pub psi: f64,
    /// Axes with fewer than two distinct values.
    pub skipped_axes: Vec<String>,
    pub tie_policy: String,
}

/// Per-axis Kendall τ averaged over groups that differ only along that
/// axis, and their mean Ψ.
pub fn granulated_kendall(records: &[CorrelationRecord], axes: &[String]) -> Result<CorrelationReport> {
    if records.len() < 2 {
        return Err(Error::InvalidArgument("need at least two records".into()));
    }
    for (i, r) in records.iter().enumerate() {
        if let Some(a) = axes.iter().find(|a| !r.hyperparams.contains_key(*a)) {
            return Err(Error::InvalidArgument(format!("record {i} has no value for axis {a}")));
        }
    }
    let measure: Vec<f64> = records.iter().map(|r| r.measure).collect();
    let gap: Vec<f64> = records.iter().map(|r| r.gap).collect();
    let overall_tau = kendall_tau(&measure, &gap)?;

    let mut per_axis_tau = BTreeMap::new();
    let mut per_axis = BTreeMap::new();
    let mut skipped_axes = Vec::new();
    for axis in axes {
        let distinct: std::collections::BTreeSet<&String> = records.iter().map(|r| &r.hyperparams[axis]).collect();
        if distinct.len() < 2 {
            skipped_axes.push(axis.clone());
            continue;
        }
        let mut groups: BTreeMap<Vec<&String>, Vec<usize>> = BTreeMap::new();
        for (i, r) in records.iter().enumerate() {
            let key: Vec<&String> = axes.iter().filter(|a| *a != axis).map(|a| &r.hyperparams[a]).collect();
            groups.entry(key).or_default().push(i);
        }
        let taus: Vec<f64> = groups
            .values()
            .filter(|g| g.len() >= 2)
            .map(|g| {
                let m: Vec<f64> = g.iter().map(|&i| measure[i]).collect();
                let v: Vec<f64> = g.iter().map(|&i| gap[i]).collect();
                kendall_tau(&m, &v)
            })
            .collect::<Result<_>>()?;
        if taus.is_empty() {
            skipped_axes.push(axis.clone());
            continue;
        }
        let tau = taus.iter().sum::<f64>() / taus.len() as f64;
        per_axis_tau.insert(axis.clone(), tau);
        per_axis.insert(axis.clone(), AxisSummary { tau, groups: taus.len() });
    }
    let psi = if per_axis_tau.is_empty() {
        f64::NAN
    } else {
        per_axis_tau.values().sum::<f64>() / per_axis_tau.len() as f64
    };
    Ok(CorrelationReport {
        overall_tau,
        per_axis_tau,
        per_axis,
        psi,
        skipped_axes,
        tie_policy: "tau-a".into(),
    })
}

/// Default smoothing for `classes` outputs.
pub fn default_label_smoothing(classes: usize) -> f64 {
    if classes >= 100 {
        0.1
    } else {
        0.01
    }
}
