//! Dense helpers on top of nalgebra plus a matrix-free conjugate gradient.

use nalgebra::{DMatrix, DVector};

use crate::{Error, Result, Scalar};

/// `a · aᵀ`.
pub fn gram<T: Scalar>(a: &DMatrix<T>) -> DMatrix<T> {
    a * a.transpose()
}

/// `a · diag(s)`.
pub fn scale_columns<T: Scalar>(a: &DMatrix<T>, s: &[T]) -> DMatrix<T> {
    assert_eq!(a.ncols(), s.len(), "column scale length");
    let mut out = a.clone();
    for (j, mut col) in out.column_iter_mut().enumerate() {
        col *= s[j];
    }
    out
}

pub fn frobenius<T: Scalar>(a: &DMatrix<T>) -> T {
    a.iter().fold(T::zero(), |acc, &x| acc + x * x).sqrt()
}

/// `‖a − b‖_F / ‖b‖_F`; returns the absolute gap when `b` is zero.
pub fn rel_frobenius<T: Scalar>(a: &DMatrix<T>, b: &DMatrix<T>) -> T {
    let diff = frobenius(&(a - b));
    let base = frobenius(b);
    if base > T::zero() {
        diff / base
    } else {
        diff
    }
}

/// Eigenvalues of a symmetric matrix, sorted descending.
pub fn sym_eigenvalues_desc<T: Scalar>(a: &DMatrix<T>) -> Vec<T> {
    let eig = a.clone().symmetric_eigenvalues();
    let mut v: Vec<T> = eig.iter().copied().collect();
    v.sort_by(|x, y| y.partial_cmp(x).unwrap_or(std::cmp::Ordering::Equal));
    v
}

/// Solves `a x = b` for symmetric positive definite `a`.
pub fn spd_solve<T: Scalar>(a: &DMatrix<T>, b: &DMatrix<T>) -> Result<DMatrix<T>> {
    let chol = a.clone().cholesky().ok_or(Error::NotPositiveDefinite)?;
    Ok(chol.solve(b))
}

pub fn spd_solve_vec<T: Scalar>(a: &DMatrix<T>, b: &DVector<T>) -> Result<DVector<T>> {
    let chol = a.clone().cholesky().ok_or(Error::NotPositiveDefinite)?;
    Ok(chol.solve(b))
}

pub fn spd_inverse<T: Scalar>(a: &DMatrix<T>) -> Result<DMatrix<T>> {
    let chol = a.clone().cholesky().ok_or(Error::NotPositiveDefinite)?;
    Ok(chol.inverse())
}

/// `a + shift · I` for square `a`.
pub fn add_diagonal<T: Scalar>(a: &DMatrix<T>, shift: T) -> DMatrix<T> {
    let mut out = a.clone();
    for i in 0..out.nrows().min(out.ncols()) {
        out[(i, i)] += shift;
    }
    out
}

pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

pub fn norm2<T: Scalar>(a: &[T]) -> T {
    dot(a, a).sqrt()
}

/// Outcome of [`conjugate_gradient`].
#[derive(Debug, Clone)]
pub struct CgSolution<T> {
    pub x: Vec<T>,
    pub iterations: usize,
    pub relative_residual: T,
}

/// Conjugate gradient for a symmetric positive definite operator given as a
/// closure. Stops once `‖b − A x‖ ≤ tol · ‖b‖`.
pub fn conjugate_gradient<T, F>(apply: F, b: &[T], tol: T, max_iter: usize) -> Result<CgSolution<T>>
where
    T: Scalar,
    F: Fn(&[T]) -> Vec<T>,
{
    let n = b.len();
    let b_norm = norm2(b);
    if b_norm == T::zero() {
        return Ok(CgSolution {
            x: vec![T::zero(); n],
            iterations: 0,
            relative_residual: T::zero(),
        });
    }
    let mut x = vec![T::zero(); n];
    let mut r = b.to_vec();
    let mut p = r.clone();
    let mut rr = dot(&r, &r);
    for it in 0..max_iter {
        let ap = apply(&p);
        let pap = dot(&p, &ap);
        if pap <= T::zero() {
            return Err(Error::NotPositiveDefinite);
        }
        let step = rr / pap;
        for i in 0..n {
            x[i] += step * p[i];
            r[i] -= step * ap[i];
        }
        let rr_new = dot(&r, &r);
        let rel = rr_new.sqrt() / b_norm;
        if rel <= tol {
            // Confirm against the true residual; the recursive one drifts.
            let ax = apply(&x);
            let true_res: Vec<T> = b.iter().zip(&ax).map(|(&bi, &ai)| bi - ai).collect();
            let true_rel = norm2(&true_res) / b_norm;
            if true_rel <= tol {
                return Ok(CgSolution {
                    x,
                    iterations: it + 1,
                    relative_residual: true_rel,
                });
            }
            r = true_res;
            rr = dot(&r, &r);
            p = r.clone();
            continue;
        }
        let ratio = rr_new / rr;
        for i in 0..n {
            p[i] = r[i] + ratio * p[i];
        }
        rr = rr_new;
    }
    let ax = apply(&x);
    let res: Vec<T> = b.iter().zip(&ax).map(|(&bi, &ai)| bi - ai).collect();
    Err(Error::NoConvergence {
        solver: "conjugate gradient",
        iterations: max_iter,
        residual: (norm2(&res) / b_norm).as_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cg_matches_cholesky() {
        let a = DMatrix::from_row_slice(3, 3, &[4.0, 1.0, 0.5, 1.0, 3.0, 0.2, 0.5, 0.2, 2.0]);
        let b = DVector::from_vec(vec![1.0, -2.0, 0.5]);
        let direct = spd_solve_vec(&a, &b).unwrap();
        let cg = conjugate_gradient(
            |v: &[f64]| (&a * DVector::from_column_slice(v)).as_slice().to_vec(),
            b.as_slice(),
            1e-12,
            50,
        )
        .unwrap();
        for i in 0..3 {
            assert!((direct[i] - cg.x[i]).abs() < 1e-10);
        }
    }

    #[test]
    fn eigenvalues_sorted_descending() {
        let a = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 3.0, 2.0]));
        assert_eq!(sym_eigenvalues_desc(&a), vec![3.0, 2.0, 1.0]);
    }
}
