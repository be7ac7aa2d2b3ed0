use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::{Error, Result, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SplitTag {
    #[serde(rename = "S_P")]
    Prior,
    #[serde(rename = "S_Q")]
    Posterior,
    #[serde(rename = "test")]
    Test,
}

/// Inputs (N×D) and targets (N×K).
#[derive(Debug, Clone, PartialEq)]
pub struct Batch<T: Scalar> {
    pub inputs: DMatrix<T>,
    pub targets: DMatrix<T>,
    pub split_tag: SplitTag,
}

impl<T: Scalar> Batch<T> {
    pub fn new(inputs: DMatrix<T>, targets: DMatrix<T>, split_tag: SplitTag) -> Result<Self> {
        if inputs.nrows() != targets.nrows() {
            return Err(Error::Shape(format!(
                "{} input rows but {} target rows",
                inputs.nrows(),
                targets.nrows()
            )));
        }
        Ok(Self {
            inputs,
            targets,
            split_tag,
        })
    }

    /// Builds one-hot targets from class indices.
    pub fn classification(inputs: DMatrix<T>, labels: &[usize], classes: usize, split_tag: SplitTag) -> Result<Self> {
        let mut targets = DMatrix::zeros(labels.len(), classes);
        for (i, &c) in labels.iter().enumerate() {
            if c >= classes {
                return Err(Error::InvalidLabel { label: c, classes });
            }
            targets[(i, c)] = T::one();
        }
        Self::new(inputs, targets, split_tag)
    }

    pub fn len(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.nrows() == 0
    }

    /// Argmax of each target row, ties to the lowest index.
    pub fn labels(&self) -> Vec<usize> {
        argmax_rows(&self.targets)
    }

    pub fn select(&self, rows: &[usize], split_tag: SplitTag) -> Self {
        Self {
            inputs: self.inputs.select_rows(rows.iter()),
            targets: self.targets.select_rows(rows.iter()),
            split_tag,
        }
    }

    /// Targets flattened sample-major, matching Jacobian row order.
    pub fn flat_targets(&self) -> Vec<T> {
        flatten_rows(&self.targets)
    }
}

pub fn argmax_rows<T: Scalar>(m: &DMatrix<T>) -> Vec<usize> {
    (0..m.nrows())
        .map(|i| {
            let mut best = 0;
            for k in 1..m.ncols() {
                if m[(i, k)] > m[(i, best)] {
                    best = k;
                }
            }
            best
        })
        .collect()
}

/// Row-major flattening: index `n·K + k`.
pub fn flatten_rows<T: Scalar>(m: &DMatrix<T>) -> Vec<T> {
    let mut out = Vec::with_capacity(m.len());
    for i in 0..m.nrows() {
        for k in 0..m.ncols() {
            out.push(m[(i, k)]);
        }
    }
    out
}

pub fn unflatten_rows<T: Scalar>(v: &[T], rows: usize, cols: usize) -> DMatrix<T> {
    DMatrix::from_row_slice(rows, cols, v)
}
