use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::net::{JacobianMatrix, Space};
use crate::{linalg, Error, Result, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelKind {
    Ntk,
    Ctk,
    MaskedNtk,
    MaskedCtk,
}

impl KernelKind {
    pub fn masked(self) -> Self {
        match self {
            KernelKind::Ntk | KernelKind::MaskedNtk => KernelKind::MaskedNtk,
            KernelKind::Ctk | KernelKind::MaskedCtk => KernelKind::MaskedCtk,
        }
    }
}

/// NK×NK Gram matrix, rows in the Jacobian's sample-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelMatrix<T: Scalar> {
    pub kind: KernelKind,
    pub values: DMatrix<T>,
    pub n_samples: usize,
    pub n_outputs: usize,
}

impl<T: Scalar> KernelMatrix<T> {
    pub fn dim(&self) -> usize {
        self.values.nrows()
    }

    pub fn trace(&self) -> T {
        self.values.trace()
    }

    pub fn max_asymmetry(&self) -> T {
        let v = &self.values;
        let mut m = T::zero();
        for i in 0..v.nrows() {
            for j in 0..i {
                let d = (v[(i, j)] - v[(j, i)]).abs();
                if d > m {
                    m = d;
                }
            }
        }
        m
    }

    /// Fails when the smallest eigenvalue is below `−1e-8·tr/NK`.
    pub fn check_psd(&self) -> Result<()> {
        let n = self.dim();
        if n == 0 {
            return Ok(());
        }
        let eig = linalg::sym_eigenvalues_desc(&self.values);
        let min = eig[n - 1].as_f64();
        let tol = 1e-8 * self.trace().as_f64().abs() / n as f64;
        if min < -tol {
            return Err(Error::NotPsd {
                min_eigenvalue: min,
                tolerance: tol,
            });
        }
        Ok(())
    }

    pub fn rel_frobenius_to(&self, other: &Self) -> T {
        linalg::rel_frobenius(&self.values, &other.values)
    }

    /// Plain CSV, one kernel row per line.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        for i in 0..self.values.nrows() {
            let row: Vec<String> = (0..self.values.ncols())
                .map(|j| format!("{:e}", self.values[(i, j)].as_f64()))
                .collect();
            writeln!(w, "{}", row.join(","))?;
        }
        w.flush()?;
        Ok(())
    }
}

fn gram<T: Scalar>(j: &DMatrix<T>) -> DMatrix<T> {
    let mut g = linalg::gram(j);
    // Symmetrize so downstream eigen/Cholesky see an exactly symmetric matrix.
    let half = T::lit(0.5);
    for r in 0..g.nrows() {
        for c in 0..r {
            let v = (g[(r, c)] + g[(c, r)]) * half;
            g[(r, c)] = v;
            g[(c, r)] = v;
        }
    }
    g
}

/// `J Jᵀ`. Given `J_θ` this is the NTK; given `J_c` it is the CTK.
pub fn empirical_ntk<T: Scalar>(j: &JacobianMatrix<T>) -> KernelMatrix<T> {
    KernelMatrix {
        kind: match j.space {
            Space::Parameter => KernelKind::Ntk,
            Space::Connectivity => KernelKind::Ctk,
        },
        values: gram(&j.values),
        n_samples: j.n_samples,
        n_outputs: j.n_outputs,
    }
}

/// `J_θ diag(θ*)² J_θᵀ`.
pub fn empirical_ctk<T: Scalar>(j_theta: &JacobianMatrix<T>, theta: &[T]) -> Result<KernelMatrix<T>> {
    Ok(empirical_ntk(&j_theta.to_connectivity(theta)?))
}

/// Kernel of the Jacobian restricted to the `mask` columns. `kind`
/// selects NTK or CTK.
pub fn masked_kernel<T: Scalar>(
    j_theta: &JacobianMatrix<T>,
    theta: &[T],
    mask: &[bool],
    kind: KernelKind,
) -> Result<KernelMatrix<T>> {
    let j = match kind {
        KernelKind::Ntk | KernelKind::MaskedNtk => j_theta.clone(),
        KernelKind::Ctk | KernelKind::MaskedCtk => j_theta.to_connectivity(theta)?,
    };
    let mut k = empirical_ntk(&j.masked(mask)?);
    k.kind = kind.masked();
    Ok(k)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param() -> JacobianMatrix<f64> {
        JacobianMatrix::new(DMatrix::from_column_slice(2, 1, &[1.0, 2.0]), 2, 1, Space::Parameter).unwrap()
    }

    #[test]
    fn hand_products() {
        let j = one_param();
        let ntk = empirical_ntk(&j);
        assert_eq!(ntk.values, DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 4.0]));
        let ctk = empirical_ctk(&j, &[2.0]).unwrap();
        assert_eq!(ctk.values, DMatrix::from_row_slice(2, 2, &[4.0, 8.0, 8.0, 16.0]));
        assert_eq!(ctk.kind, KernelKind::Ctk);
        assert_eq!(ctk.trace(), 20.0);
    }

    #[test]
    fn identity_jacobian() {
        let j = JacobianMatrix::new(DMatrix::<f64>::identity(3, 3), 3, 1, Space::Parameter).unwrap();
        assert_eq!(empirical_ntk(&j).values, DMatrix::identity(3, 3));
    }

    #[test]
    fn unit_parameters_give_equal_kernels() {
        let vals = DMatrix::from_fn(4, 3, |i, j| ((i * 3 + j) as f64).sin());
        let j = JacobianMatrix::new(vals, 2, 2, Space::Parameter).unwrap();
        assert_eq!(empirical_ctk(&j, &[1.0; 3]).unwrap().values, empirical_ntk(&j).values);
    }

    #[test]
    fn masks() {
        let vals = DMatrix::from_fn(4, 3, |i, j| ((i * 3 + j) as f64).cos());
        let j = JacobianMatrix::new(vals, 4, 1, Space::Parameter).unwrap();
        let theta = [0.5, -2.0, 3.0];
        let full = masked_kernel(&j, &theta, &[true; 3], KernelKind::Ctk).unwrap();
        assert_eq!(full.values, empirical_ctk(&j, &theta).unwrap().values);
        assert_eq!(full.kind, KernelKind::MaskedCtk);
        let none = masked_kernel(&j, &theta, &[false; 3], KernelKind::Ntk).unwrap();
        assert_eq!(none.values, DMatrix::zeros(4, 4));
        assert!(masked_kernel(&j, &theta, &[true; 2], KernelKind::Ntk).is_err());
    }

    #[test]
    fn psd_check() {
        let j = one_param();
        assert!(empirical_ntk(&j).check_psd().is_ok());
        let bad = KernelMatrix {
            kind: KernelKind::Ntk,
            values: DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]),
            n_samples: 2,
            n_outputs: 1,
        };
        assert!(matches!(bad.check_psd(), Err(Error::NotPsd { .. })));
    }

    #[test]
    fn csv_export() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("k.csv");
        empirical_ntk(&one_param()).write_csv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let rows: Vec<Vec<f64>> = text
            .lines()
            .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
            .collect();
        assert_eq!(rows, vec![vec![1.0, 2.0], vec![2.0, 4.0]]);
    }
}
