//! Ridge system `min ‖r − J c‖² + λ‖c‖²` shared by the posterior mean and
//! the RTO sampler. Factors the smaller of the primal and dual normal
//! equations once.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::{Error, Result, Scalar};

pub(crate) struct Ridge<'a, T: Scalar> {
    j: &'a DMatrix<T>,
    chol: Cholesky<T, Dyn>,
    dual: bool,
}

impl<'a, T: Scalar> Ridge<'a, T> {
    /// `lambda = σ²/α²`.
    pub(crate) fn new(j: &'a DMatrix<T>, lambda: T) -> Result<Self> {
        let (rows, cols) = j.shape();
        let dual = cols > rows;
        let mut a = if dual { j * j.transpose() } else { j.transpose() * j };
        for i in 0..a.nrows() {
            a[(i, i)] += lambda;
        }
        let chol = a.cholesky().ok_or(Error::NotPositiveDefinite)?;
        Ok(Self { j, chol, dual })
    }

    /// `(JᵀJ + λI)⁻¹ Jᵀ r`, computed as `Jᵀ (JJᵀ + λI)⁻¹ r` when wide.
    pub(crate) fn solve(&self, r: &[T]) -> Vec<T> {
        let r = DVector::from_column_slice(r);
        let c = if self.dual {
            self.j.transpose() * self.chol.solve(&r)
        } else {
            self.chol.solve(&(self.j.transpose() * r))
        };
        c.as_slice().to_vec()
    }

    pub(crate) fn apply_j(&self, c: &[T]) -> Vec<T> {
        (self.j * DVector::from_column_slice(c)).as_slice().to_vec()
    }
}
