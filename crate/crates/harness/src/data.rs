//! Dataset ingestion, splitting and synthetic generators.

use std::path::Path;

use ctk_core::net::{Batch, SplitTag};
use ctk_core::{rng, Data};
use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

/// Column roles of a CSV file. With `classes` set, `targets` must name a
/// single column of class indices, expanded to one-hot targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvSchema {
    pub features: Vec<String>,
    pub targets: Vec<String>,
    #[serde(default)]
    pub classes: Option<usize>,
}

fn column_index(header: &csv::StringRecord, name: &str) -> Result<usize> {
    header
        .iter()
        .position(|h| h.trim() == name)
        .ok_or_else(|| HarnessError::MissingColumn(name.to_string()))
}

/// Reads a headed, comma-separated file into raw (unstandardized) matrices.
/// Rows are numbered from 1, counting the header as row 0.
pub fn load_csv(path: &Path, schema: &CsvSchema) -> Result<Data> {
    if schema.features.is_empty() || schema.targets.is_empty() {
        return Err(HarnessError::Config("CSV schema needs feature and target columns".into()));
    }
    if schema.classes.is_some() && schema.targets.len() != 1 {
        return Err(HarnessError::Config("classification needs exactly one label column".into()));
    }
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let header = reader.headers()?.clone();
    let fidx = schema.features.iter().map(|c| column_index(&header, c)).collect::<Result<Vec<_>>>()?;
    let tidx = schema.targets.iter().map(|c| column_index(&header, c)).collect::<Result<Vec<_>>>()?;
    let mut feats = Vec::new();
    let mut targs = Vec::new();
    let mut n = 0;
    for (r, rec) in reader.records().enumerate() {
        let rec = rec?;
        let parse = |i: usize, name: &str| -> Result<f64> {
            let raw = rec.get(i).unwrap_or("").trim();
            raw.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| HarnessError::NonNumeric {
                    row: r + 1,
                    column: name.to_string(),
                    value: raw.to_string(),
                })
        };
        for (&i, name) in fidx.iter().zip(&schema.features) {
            feats.push(parse(i, name)?);
        }
        for (&i, name) in tidx.iter().zip(&schema.targets) {
            targs.push(parse(i, name)?);
        }
        n += 1;
    }
    if n == 0 {
        return Err(HarnessError::Data(format!("{} has no data rows", path.display())));
    }
    let inputs = DMatrix::from_row_slice(n, fidx.len(), &feats);
    match schema.classes {
        Some(k) => {
            let labels = targs
                .iter()
                .enumerate()
                .map(|(r, &v)| {
                    if v >= 0.0 && v.fract() == 0.0 && (v as usize) < k {
                        Ok(v as usize)
                    } else {
                        Err(HarnessError::Data(format!(
                            "row {}: label {v} is not a class index below {k}",
                            r + 1
                        )))
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(Batch::classification(inputs, &labels, k, SplitTag::Prior)?)
        }
        None => Ok(Batch::new(
            inputs,
            DMatrix::from_row_slice(n, tidx.len(), &targs),
            SplitTag::Prior,
        )?),
    }
}

/// Per-column affine standardization fitted on one split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub input_mean: Vec<f64>,
    pub input_std: Vec<f64>,
    /// Absent for one-hot targets.
    pub target_mean: Option<Vec<f64>>,
    pub target_std: Option<Vec<f64>>,
}

fn column_moments(m: &DMatrix<f64>) -> (Vec<f64>, Vec<f64>) {
    let n = m.nrows() as f64;
    m.column_iter()
        .map(|c| {
            let mean = c.sum() / n;
            let var = c.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            // Constant columns are only centred.
            (mean, if var > 0.0 { var.sqrt() } else { 1.0 })
        })
        .unzip()
}

impl Standardizer {
    pub fn fit(data: &Data, targets: bool) -> Self {
        let (input_mean, input_std) = column_moments(&data.inputs);
        let (target_mean, target_std) = if targets {
            let (m, s) = column_moments(&data.targets);
            (Some(m), Some(s))
        } else {
            (None, None)
        };
        Self {
            input_mean,
            input_std,
            target_mean,
            target_std,
        }
    }

    pub fn apply(&self, data: &Data) -> Data {
        let scale = |m: &DMatrix<f64>, mean: &[f64], std: &[f64]| {
            DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| (m[(i, j)] - mean[j]) / std[j])
        };
        let targets = match (&self.target_mean, &self.target_std) {
            (Some(m), Some(s)) => scale(&data.targets, m, s),
            _ => data.targets.clone(),
        };
        Batch {
            inputs: scale(&data.inputs, &self.input_mean, &self.input_std),
            targets,
            split_tag: data.split_tag,
        }
    }
}

/// Seeded shuffle into `S_P` (`round(ratio·N)` rows) and `S_Q`.
pub fn make_split(data: &Data, ratio: f64, seed: u64) -> Result<(Data, Data)> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(HarnessError::Config(format!("split ratio {ratio} must lie in (0, 1)")));
    }
    let n = data.len();
    let n_p = (ratio * n as f64).round() as usize;
    if n_p == 0 || n_p == n {
        return Err(HarnessError::Data(format!(
            "ratio {ratio} on {n} rows leaves one side of the split empty"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::seeded(seed));
    Ok((
        data.select(&order[..n_p], SplitTag::Prior),
        data.select(&order[n_p..], SplitTag::Posterior),
    ))
}

/// Training points outside `gap` and an evenly spaced test grid over
/// `[−3, 3]` that crosses it.
#[derive(Debug, Clone)]
pub struct GapData {
    pub train: Data,
    pub test: Data,
    pub gap: (f64, f64),
}

pub const GAP_RANGE: (f64, f64) = (-3.0, 3.0);

/// `y = sin(2x) + noise·ε` with `x` uniform on `[−3, 3]` minus the gap.
pub fn synthetic_gap_1d(n: usize, gap: (f64, f64), noise: f64, n_test: usize, seed: u64) -> Result<GapData> {
    let (lo, hi) = GAP_RANGE;
    if !(lo < gap.0 && gap.0 < gap.1 && gap.1 < hi) {
        return Err(HarnessError::Config(format!("gap {gap:?} must lie strictly inside [−3, 3]")));
    }
    if n == 0 || !(noise >= 0.0) {
        return Err(HarnessError::Config("gap data needs n ≥ 1 and noise ≥ 0".into()));
    }
    let mut r = rng::seeded(seed);
    let left = gap.0 - lo;
    let span = left + (hi - gap.1);
    let xs: Vec<f64> = (0..n)
        .map(|_| {
            let u = r.random_range(0.0..span);
            if u < left {
                lo + u
            } else {
                gap.1 + (u - left)
            }
        })
        .collect();
    let eps: Vec<f64> = rng::normal_vec(&mut r, n, 1.0);
    let ys: Vec<f64> = xs.iter().zip(&eps).map(|(x, e)| (2.0 * x).sin() + noise * e).collect();
    let m = n_test.max(2);
    let xt: Vec<f64> = (0..m).map(|i| lo + (hi - lo) * i as f64 / (m - 1) as f64).collect();
    let yt: Vec<f64> = xt.iter().map(|x| (2.0 * x).sin()).collect();
    Ok(GapData {
        train: Batch::new(DMatrix::from_column_slice(n, 1, &xs), DMatrix::from_column_slice(n, 1, &ys), SplitTag::Prior)?,
        test: Batch::new(DMatrix::from_column_slice(m, 1, &xt), DMatrix::from_column_slice(m, 1, &yt), SplitTag::Test)?,
        gap,
    })
}

/// Unit-variance Gaussian clusters with centres spaced evenly on a circle
/// of diameter `separation` in the first two coordinates. Labels cycle
/// through the classes.
pub fn two_blobs(n: usize, classes: usize, separation: f64, dim: usize, seed: u64) -> Result<Data> {
    if classes < 2 || n == 0 || !(separation > 0.0) || dim == 0 || (classes > 2 && dim < 2) {
        return Err(HarnessError::Config(
            "blobs need n ≥ 1, ≥ 2 classes, positive separation and dim ≥ 2 beyond two classes".into(),
        ));
    }
    let mut r = rng::seeded(seed);
    let labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    let mut x = DMatrix::from_vec(n, dim, rng::normal_vec(&mut r, n * dim, 1.0));
    for (i, &c) in labels.iter().enumerate() {
        let angle = 2.0 * std::f64::consts::PI * c as f64 / classes as f64;
        x[(i, 0)] += 0.5 * separation * angle.cos();
        if dim > 1 {
            x[(i, 1)] += 0.5 * separation * angle.sin();
        }
    }
    Ok(Batch::classification(x, &labels, classes, SplitTag::Prior)?)
}

/// Evenly spaced 1-D inputs on `[lo, hi]`.
pub fn grid(lo: f64, hi: f64, n: usize) -> DMatrix<f64> {
    let m = n.max(2);
    DMatrix::from_fn(m, 1, |i, _| lo + (hi - lo) * i as f64 / (m - 1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    fn schema(f: &[&str], t: &[&str]) -> CsvSchema {
        CsvSchema {
            features: f.iter().map(|s| s.to_string()).collect(),
            targets: t.iter().map(|s| s.to_string()).collect(),
            classes: None,
        }
    }

    #[test]
    fn two_row_csv() {
        let f = write("x,y\n1,2\n3,4\n");
        let b = load_csv(f.path(), &schema(&["x"], &["y"])).unwrap();
        assert_eq!(b.inputs.shape(), (2, 1));
        assert_eq!(b.targets.shape(), (2, 1));
        assert_eq!(b.inputs[(1, 0)], 3.0);
        assert_eq!(b.targets[(0, 0)], 2.0);
    }

    #[test]
    fn missing_column_is_named() {
        let f = write("x,y\n1,2\n");
        let err = load_csv(f.path(), &schema(&["x"], &["z"])).unwrap_err();
        assert!(matches!(err, HarnessError::MissingColumn(ref c) if c == "z"));
        assert!(err.to_string().contains("`z`"));
    }

    #[test]
    fn non_numeric_cell_names_row_and_column() {
        let f = write("x,y\n1,2\n3,abc\n");
        let err = load_csv(f.path(), &schema(&["x"], &["y"])).unwrap_err();
        match err {
            HarnessError::NonNumeric { row, column, value } => {
                assert_eq!((row, column.as_str(), value.as_str()), (2, "y", "abc"));
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn class_column_becomes_one_hot() {
        let f = write("a,b,label\n0.1,0.2,1\n0.3,0.4,0\n");
        let mut s = schema(&["a", "b"], &["label"]);
        s.classes = Some(3);
        let b = load_csv(f.path(), &s).unwrap();
        assert_eq!(b.labels(), vec![1, 0]);
        assert_eq!(b.targets.ncols(), 3);
        s.classes = Some(1);
        assert!(load_csv(f.path(), &s).is_err());
    }

    #[test]
    fn standardization_uses_prior_split_only() {
        let f = write("x,y\n1,2\n3,4\n10,5\n-2,1\n7,0\n");
        let b = load_csv(f.path(), &schema(&["x"], &["y"])).unwrap();
        let (sp, sq) = make_split(&b, 0.6, 3).unwrap();
        let st = Standardizer::fit(&sp, true);
        let zp = st.apply(&sp);
        for col in [zp.inputs.column(0), zp.targets.column(0)] {
            let mean = col.sum() / col.len() as f64;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / col.len() as f64;
            assert!(mean.abs() <= 1e-12);
            assert!((var - 1.0).abs() <= 1e-12);
        }
        let zq = st.apply(&sq);
        assert_eq!(zq.inputs[(0, 0)], (sq.inputs[(0, 0)] - st.input_mean[0]) / st.input_std[0]);
    }

    #[test]
    fn split_sizes_determinism_and_union() {
        let x = DMatrix::from_fn(100, 1, |i, _| i as f64);
        let b = Batch::new(x.clone(), x, SplitTag::Prior).unwrap();
        let (p, q) = make_split(&b, 0.9, 5).unwrap();
        assert_eq!((p.len(), q.len()), (90, 10));
        assert_eq!(p.split_tag, SplitTag::Prior);
        assert_eq!(q.split_tag, SplitTag::Posterior);
        let (p2, q2) = make_split(&b, 0.9, 5).unwrap();
        assert_eq!((p.inputs.clone(), q.inputs.clone()), (p2.inputs, q2.inputs));
        let mut all: Vec<f64> = p.inputs.iter().chain(q.inputs.iter()).copied().collect();
        all.sort_by(f64::total_cmp);
        assert_eq!(all, (0..100).map(|i| i as f64).collect::<Vec<_>>());
        assert!(make_split(&b, 1.0, 0).is_err());
        assert!(make_split(&b, 0.001, 0).is_err());
    }

    #[test]
    fn gap_data() {
        let g = synthetic_gap_1d(200, (-1.0, 1.0), 0.0, 101, 4).unwrap();
        for i in 0..200 {
            let x = g.train.inputs[(i, 0)];
            assert!(!(x > -1.0 && x < 1.0) && (-3.0..=3.0).contains(&x));
            assert_eq!(g.train.targets[(i, 0)], (2.0 * x).sin());
        }
        assert!(g.test.inputs.iter().any(|&x| x > -1.0 && x < 1.0));
        assert!(synthetic_gap_1d(10, (1.0, -1.0), 0.1, 5, 0).is_err());
    }

    #[test]
    fn blobs_are_balanced() {
        let b = two_blobs(10, 2, 6.0, 2, 1).unwrap();
        let labels = b.labels();
        assert_eq!(labels.iter().filter(|&&c| c == 0).count(), 5);
        assert!(two_blobs(10, 3, 6.0, 1, 1).is_err());
    }
}
