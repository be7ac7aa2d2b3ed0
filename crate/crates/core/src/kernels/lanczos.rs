use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::gram::KernelMatrix;
use crate::net::JacobianOperator;
use crate::{linalg, rng, Error, Result, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpectrumMethod {
    Dense,
    Lanczos,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct EigenSpectrum<T> {
    /// Nonincreasing.
    pub eigenvalues: Vec<T>,
    pub method: SpectrumMethod,
    pub iterations: usize,
}

impl<T: Scalar> EigenSpectrum<T> {
    pub fn sum(&self) -> T {
        self.eigenvalues.iter().fold(T::zero(), |a, &b| a + b)
    }

    pub fn max(&self) -> T {
        self.eigenvalues.first().copied().unwrap_or_else(T::zero)
    }
}

pub fn dense_spectrum<T: Scalar>(k: &KernelMatrix<T>) -> EigenSpectrum<T> {
    EigenSpectrum {
        eigenvalues: linalg::sym_eigenvalues_desc(&k.values),
        method: SpectrumMethod::Dense,
        iterations: k.dim(),
    }
}

/// A symmetric linear map accessed only through products.
pub trait SymmetricOperator<T: Scalar>: Sync {
    fn dim(&self) -> usize;
    fn apply(&self, v: &[T]) -> Vec<T>;
}

impl<T: Scalar> SymmetricOperator<T> for DMatrix<T> {
    fn dim(&self) -> usize {
        self.nrows()
    }

    fn apply(&self, v: &[T]) -> Vec<T> {
        let x = nalgebra::DVectorView::from_slice(v, v.len());
        (self * x).as_slice().to_vec()
    }
}

impl<T: Scalar> SymmetricOperator<T> for KernelMatrix<T> {
    fn dim(&self) -> usize {
        self.values.nrows()
    }

    fn apply(&self, v: &[T]) -> Vec<T> {
        self.values.apply(v)
    }
}

/// `v ↦ J (Jᵀ v)` without forming the kernel.
pub struct KernelOperator<'a, J> {
    pub jacobian: &'a J,
}

impl<T: Scalar, J: JacobianOperator<T>> SymmetricOperator<T> for KernelOperator<'_, J> {
    fn dim(&self) -> usize {
        self.jacobian.n_rows()
    }

    fn apply(&self, v: &[T]) -> Vec<T> {
        let n = self.jacobian.n_samples();
        let w = self.jacobian.vjp(0..n, v);
        self.jacobian.jvp(0..n, &w)
    }
}

fn project_out<T: Scalar>(w: &mut [T], basis: &[Vec<T>]) {
    for q in basis {
        let c = linalg::dot(w, q);
        w.iter_mut().zip(q).for_each(|(wi, &qi)| *wi -= c * qi);
    }
}

/// Ritz values after `iters` Lanczos steps with full reorthogonalization.
/// On breakdown the Ritz values of the invariant subspace found so far are
/// returned and `iterations` records how many steps ran.
pub fn lanczos_spectrum<T: Scalar>(
    op: &dyn SymmetricOperator<T>,
    dim: usize,
    iters: usize,
    seed: u64,
) -> Result<EigenSpectrum<T>> {
    if op.dim() != dim {
        return Err(Error::Shape(format!("operator has dimension {}, expected {dim}", op.dim())));
    }
    if iters == 0 || iters > dim {
        return Err(Error::InvalidArgument(format!("lanczos needs 1 ≤ iters ≤ {dim}, got {iters}")));
    }
    let mut r = rng::seeded(seed);
    let mut q = rng::normal_vec::<T, _>(&mut r, dim, T::one());
    let n0 = linalg::norm2(&q);
    q.iter_mut().for_each(|v| *v /= n0);

    let mut basis: Vec<Vec<T>> = Vec::with_capacity(iters);
    let mut alpha: Vec<T> = Vec::with_capacity(iters);
    let mut beta: Vec<T> = Vec::with_capacity(iters);
    let mut scale = T::zero();
    let tiny = T::default_epsilon() * T::lit(dim as f64);
    for _ in 0..iters {
        let mut w = op.apply(&q);
        let a = linalg::dot(&w, &q);
        basis.push(q);
        alpha.push(a);
        // Two Gram-Schmidt passes against the whole basis.
        project_out(&mut w, &basis);
        project_out(&mut w, &basis);
        let b = linalg::norm2(&w);
        scale = scale.max(a.abs() + b);
        if basis.len() == iters || b <= tiny * scale {
            break;
        }
        beta.push(b);
        q = w.into_iter().map(|v| v / b).collect();
    }

    let m = alpha.len();
    let mut t = DMatrix::<T>::zeros(m, m);
    for i in 0..m {
        t[(i, i)] = alpha[i];
        if i + 1 < m {
            t[(i, i + 1)] = beta[i];
            t[(i + 1, i)] = beta[i];
        }
    }
    Ok(EigenSpectrum {
        eigenvalues: linalg::sym_eigenvalues_desc(&t),
        method: SpectrumMethod::Lanczos,
        iterations: m,
    })
}
