//! Small dense symmetric linear algebra.
//!
//! The quantum E-step diagonalizes one `K×K` matrix per data point, with K
//! in the single digits, so a cyclic Jacobi sweep is both the simplest and
//! the most accurate choice. [`matexp_taylor_oracle`] is an independent
//! route to `exp(A)` used by tests to check the spectral one.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub const MAX_EIG_DIM: usize = 64;
const MAX_SWEEPS: usize = 100;
const OFF_DIAG_TOL: f64 = 1e-14;
const SYMMETRY_TOL: f64 = 1e-12;

/// Eigenvalues in ascending order with matching unit eigenvectors as columns.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralDecomp {
    pub eigenvalues: DVector<f64>,
    pub eigenvectors: DMatrix<f64>,
}

impl SpectralDecomp {
    /// `V diag(f(λ)) Vᵀ`.
    pub fn map_eigenvalues(&self, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
        let v = &self.eigenvectors;
        let scaled = DMatrix::from_fn(v.nrows(), v.ncols(), |i, j| {
            v[(i, j)] * f(self.eigenvalues[j])
        });
        scaled * v.transpose()
    }

    pub fn reconstruct(&self) -> DMatrix<f64> {
        self.map_eigenvalues(|x| x)
    }
}

/// Symmetric eigendecomposition by cyclic Jacobi rotations.
///
/// Eigenvalues come back ascending; each eigenvector's first entry that is
/// not numerically zero is made nonnegative.
pub fn sym_eig(a: &DMatrix<f64>) -> Result<SpectralDecomp> {
    let k = a.nrows();
    if k == 0 || k != a.ncols() || k > MAX_EIG_DIM {
        return Err(Error::InvalidArgument(format!(
            "expected a square matrix of size 1..={MAX_EIG_DIM}, got {}x{}",
            a.nrows(),
            a.ncols()
        )));
    }
    let scale = 1.0 + a.amax();
    for i in 0..k {
        for j in 0..i {
            if (a[(i, j)] - a[(j, i)]).abs() > SYMMETRY_TOL * scale {
                return Err(Error::InvalidArgument(format!(
                    "matrix is not symmetric at ({i}, {j})"
                )));
            }
        }
    }
    if a.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidArgument(
            "matrix has non-finite entries".into(),
        ));
    }

    let mut work: Vec<f64> = (0..k * k).map(|idx| a[(idx / k, idx % k)]).collect();
    let mut vecs = vec![0.0; k * k];
    jacobi_in_place(&mut work, &mut vecs, k);

    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&x, &y| work[x * k + x].total_cmp(&work[y * k + y]));
    let eigenvalues = DVector::from_iterator(k, order.iter().map(|&j| work[j * k + j]));
    let mut eigenvectors = DMatrix::from_fn(k, k, |i, c| vecs[i * k + order[c]]);
    for mut col in eigenvectors.column_iter_mut() {
        if let Some(first) = col.iter().copied().find(|x| x.abs() > 1e-12) {
            if first < 0.0 {
                col.neg_mut();
            }
        }
    }
    Ok(SpectralDecomp {
        eigenvalues,
        eigenvectors,
    })
}

/// Diagonalizes the row-major symmetric `k×k` matrix in `a` in place.
///
/// On return the diagonal of `a` holds the (unsorted) eigenvalues and `v`
/// holds the eigenvectors as columns, row-major. Inputs are not validated.
pub(crate) fn jacobi_in_place(a: &mut [f64], v: &mut [f64], k: usize) {
    v.iter_mut().for_each(|x| *x = 0.0);
    for i in 0..k {
        v[i * k + i] = 1.0;
    }
    let frob = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let target = OFF_DIAG_TOL * frob;
    for _ in 0..MAX_SWEEPS {
        let off = off_diagonal_norm(a, k);
        if off <= target || off == 0.0 {
            return;
        }
        for p in 0..k {
            for q in p + 1..k {
                let apq = a[p * k + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[q * k + q] - a[p * k + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + theta.hypot(1.0));
                let c = 1.0 / t.hypot(1.0);
                let s = t * c;
                for r in 0..k {
                    let arp = a[r * k + p];
                    let arq = a[r * k + q];
                    a[r * k + p] = c * arp - s * arq;
                    a[r * k + q] = s * arp + c * arq;
                }
                for col in 0..k {
                    let apc = a[p * k + col];
                    let aqc = a[q * k + col];
                    a[p * k + col] = c * apc - s * aqc;
                    a[q * k + col] = s * apc + c * aqc;
                }
                a[p * k + q] = 0.0;
                a[q * k + p] = 0.0;
                for r in 0..k {
                    let vrp = v[r * k + p];
                    let vrq = v[r * k + q];
                    v[r * k + p] = c * vrp - s * vrq;
                    v[r * k + q] = s * vrp + c * vrq;
                }
            }
        }
    }
}

fn off_diagonal_norm(a: &[f64], k: usize) -> f64 {
    let mut s = 0.0;
    for i in 0..k {
        for j in 0..k {
            if i != j {
                s += a[i * k + j] * a[i * k + j];
            }
        }
    }
    s.sqrt()
}

/// `exp(a)` by scaling and squaring a truncated Taylor series.
///
/// Test oracle only: it knows nothing about symmetry and is slow.
pub fn matexp_taylor_oracle(a: &DMatrix<f64>, terms: usize) -> DMatrix<f64> {
    assert!(terms >= 1, "need at least one Taylor term");
    assert!(a.is_square(), "matrix exponential of a non-square matrix");
    let n = a.nrows();
    let norm = a
        .row_iter()
        .map(|r| r.iter().map(|x| x.abs()).sum::<f64>())
        .fold(0.0, f64::max);
    let mut squarings = 0u32;
    while norm / 2f64.powi(squarings as i32) > 0.5 {
        squarings += 1;
    }
    let scaled = a / 2f64.powi(squarings as i32);
    let mut sum = DMatrix::identity(n, n);
    let mut term = DMatrix::identity(n, n);
    for j in 1..terms {
        term = &term * &scaled / j as f64;
        sum += &term;
    }
    for _ in 0..squarings {
        sum = &sum * &sum;
    }
    sum
}

/// `log Σ_j exp(v_j)` without overflow; `-∞` for an empty slice.
pub fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    if v.len() == 1 {
        return v[0];
    }
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}
