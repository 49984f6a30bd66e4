//! Small dense symmetric helpers: cyclic Jacobi eigendecomposition and the
//! `svec` packing used by the imputation solver.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// `A = V diag(values) V'` with orthonormal columns in `V`.
#[derive(Clone, Debug)]
pub struct SymEigen {
    pub values: DVector<f64>,
    pub vectors: DMatrix<f64>,
}

impl SymEigen {
    pub fn reassemble(&self) -> DMatrix<f64> {
        let scaled = &self.vectors * DMatrix::from_diagonal(&self.values);
        &scaled * self.vectors.transpose()
    }
}

const MAX_SWEEPS: usize = 100;

/// Cyclic Jacobi rotations until the off-diagonal mass is at round-off
/// level relative to the matrix norm.
pub fn sym_eigen(a: &DMatrix<f64>) -> Result<SymEigen> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::dim("square matrix", n, a.ncols()));
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::Eigen("non-finite matrix entry".into()));
    }
    let mut m = (a + a.transpose()) * 0.5;
    let mut v = DMatrix::<f64>::identity(n, n);
    let scale = m.norm();
    if scale == 0.0 {
        return Ok(SymEigen {
            values: DVector::zeros(n),
            vectors: v,
        });
    }

    for _ in 0..MAX_SWEEPS {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[(i, j)] * m[(i, j)])
            .sum::<f64>()
            .sqrt();
        if off <= f64::EPSILON * scale {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let theta = (m[(q, q)] - m[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                // M <- J' M J, rotation in the (p, q) plane
                for k in 0..n {
                    let mkp = m[(k, p)];
                    let mkq = m[(k, q)];
                    m[(k, p)] = c * mkp - s * mkq;
                    m[(k, q)] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[(p, k)];
                    let mqk = m[(q, k)];
                    m[(p, k)] = c * mpk - s * mqk;
                    m[(q, k)] = s * mpk + c * mqk;
                }
                m[(p, q)] = 0.0;
                m[(q, p)] = 0.0;
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }
    if m.iter().any(|x| !x.is_finite()) {
        return Err(Error::Eigen("Jacobi sweep produced non-finite values".into()));
    }
    Ok(SymEigen {
        values: m.diagonal(),
        vectors: v,
    })
}

pub fn is_symmetric(a: &DMatrix<f64>, tol: f64) -> bool {
    a.is_square() && (a - a.transpose()).abs().max() <= tol
}

pub fn min_eigenvalue(a: &DMatrix<f64>) -> Result<f64> {
    Ok(sym_eigen(a)?.values.min())
}

/// Length of `svec` for an `n x n` symmetric matrix.
pub fn svec_len(n: usize) -> usize {
    n * (n + 1) / 2
}

/// Upper-triangle packing, row by row, with off-diagonals scaled by
/// `sqrt(2)` so that the Euclidean norm equals the Frobenius norm.
pub fn svec(a: &DMatrix<f64>) -> Vec<f64> {
    let n = a.nrows();
    let mut out = Vec::with_capacity(svec_len(n));
    for i in 0..n {
        for j in i..n {
            let v = 0.5 * (a[(i, j)] + a[(j, i)]);
            out.push(if i == j { v } else { v * std::f64::consts::SQRT_2 });
        }
    }
    out
}

pub fn smat(v: &[f64], n: usize) -> DMatrix<f64> {
    let mut a = DMatrix::zeros(n, n);
    let mut idx = 0;
    for i in 0..n {
        for j in i..n {
            if i == j {
                a[(i, i)] = v[idx];
            } else {
                let e = v[idx] / std::f64::consts::SQRT_2;
                a[(i, j)] = e;
                a[(j, i)] = e;
            }
            idx += 1;
        }
    }
    a
}
