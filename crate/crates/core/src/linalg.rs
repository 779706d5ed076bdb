//! Small dense kernels on column-major complex storage.

use crate::{CMatrix, Complex64};

/// Lower Cholesky factor `L` of a Hermitian positive definite matrix
/// (`A = L L^H`), stored column major with the strict upper part zero.
#[derive(Debug, Clone)]
pub(crate) struct HermitianFactor {
    n: usize,
    lower: Vec<Complex64>,
}

impl HermitianFactor {
    /// Factors the Hermitian matrix whose lower triangle is read from `a`.
    /// Returns `None` when a pivot is not strictly positive and finite.
    pub(crate) fn new(a: &CMatrix) -> Option<Self> {
        let n = a.nrows();
        debug_assert_eq!(n, a.ncols());
        let mut lower = vec![Complex64::new(0.0, 0.0); n * n];
        for j in 0..n {
            for i in j..n {
                lower[i + j * n] = a[(i, j)];
            }
        }
        Self::factor_in_place(n, lower)
    }

    pub(crate) fn factor_in_place(n: usize, mut lower: Vec<Complex64>) -> Option<Self> {
        for j in 0..n {
            let mut pivot = lower[j + j * n].re;
            for k in 0..j {
                pivot -= lower[j + k * n].norm_sqr();
            }
            if !(pivot > 0.0 && pivot.is_finite()) {
                return None;
            }
            let diag = pivot.sqrt();
            lower[j + j * n] = Complex64::new(diag, 0.0);
            for k in 0..j {
                let ljk = lower[j + k * n].conj();
                if ljk == Complex64::new(0.0, 0.0) {
                    continue;
                }
                for i in (j + 1)..n {
                    let lik = lower[i + k * n];
                    lower[i + j * n] -= lik * ljk;
                }
            }
            let inv = 1.0 / diag;
            for i in (j + 1)..n {
                lower[i + j * n] *= inv;
            }
            for i in 0..j {
                lower[i + j * n] = Complex64::new(0.0, 0.0);
            }
        }
        Some(Self { n, lower })
    }

    pub(crate) fn dim(&self) -> usize {
        self.n
    }

    #[cfg(test)]
    pub(crate) fn entry(&self, i: usize, j: usize) -> Complex64 {
        self.lower[i + j * self.n]
    }

    /// `log det A = 2 sum log L_jj`.
    pub(crate) fn log_det(&self) -> f64 {
        (0..self.n).map(|j| 2.0 * self.lower[j + j * self.n].re.ln()).sum()
    }

    /// Overwrites `x` with `L^{-1} x`.
    pub(crate) fn forward_in_place(&self, x: &mut [Complex64]) {
        let n = self.n;
        for j in 0..n {
            let col = &self.lower[j * n..(j + 1) * n];
            let xj = x[j] / col[j].re;
            x[j] = xj;
            if xj == Complex64::new(0.0, 0.0) {
                continue;
            }
            for i in (j + 1)..n {
                x[i] -= col[i] * xj;
            }
        }
    }

    /// Overwrites `x` with `L^{-H} x`.
    pub(crate) fn backward_in_place(&self, x: &mut [Complex64]) {
        let n = self.n;
        for j in (0..n).rev() {
            let col = &self.lower[j * n..(j + 1) * n];
            let mut acc = x[j];
            for i in (j + 1)..n {
                acc -= col[i].conj() * x[i];
            }
            x[j] = acc / col[j].re;
        }
    }

    /// Overwrites `x` with `A^{-1} x`.
    pub(crate) fn solve_in_place(&self, x: &mut [Complex64]) {
        self.forward_in_place(x);
        self.backward_in_place(x);
    }

    /// `A^{-1} B` for a matrix right-hand side.
    pub(crate) fn solve_matrix(&self, b: &CMatrix) -> CMatrix {
        let mut out = b.clone();
        for mut col in out.column_iter_mut() {
            self.solve_in_place(col.as_mut_slice());
        }
        out
    }

    /// `L^{-1} B`.
    pub(crate) fn forward_matrix(&self, b: &CMatrix) -> CMatrix {
        let mut out = b.clone();
        for mut col in out.column_iter_mut() {
            self.forward_in_place(col.as_mut_slice());
        }
        out
    }

    /// `A^{-1}` assembled column by column from the factor.
    pub(crate) fn inverse(&self) -> CMatrix {
        self.solve_matrix(&CMatrix::identity(self.n, self.n))
    }
}

/// Orthonormal basis of the column space of `a`.
///
/// Singular values at or below `max(rows, cols) * eps * sigma_max` are treated
/// as zero, which is the thresholding of the Moore-Penrose pseudo-inverse.
pub(crate) fn range_basis(a: &CMatrix) -> CMatrix {
    let (rows, cols) = a.shape();
    if cols == 0 || rows == 0 {
        return CMatrix::zeros(rows, 0);
    }
    let svd = a.clone().svd(true, false);
    let u = svd.u.expect("left singular vectors requested");
    let sigma_max = svd.singular_values.iter().cloned().fold(0.0f64, f64::max);
    let tol = rows.max(cols) as f64 * f64::EPSILON * sigma_max;
    let keep: Vec<usize> = svd
        .singular_values
        .iter()
        .enumerate()
        .filter(|(_, &s)| s > tol)
        .map(|(i, _)| i)
        .collect();
    u.select_columns(&keep)
}

/// `Tr((I - Q Q^H) S)` for an orthonormal `Q`, real part.
pub(crate) fn residual_trace(s: &CMatrix, basis: &CMatrix) -> f64 {
    let total: f64 = (0..s.nrows()).map(|i| s[(i, i)].re).sum();
    let captured: f64 = basis
        .column_iter()
        .map(|q| {
            let sq = s * q;
            q.iter().zip(sq.iter()).map(|(a, b)| (a.conj() * b).re).sum::<f64>()
        })
        .sum();
    total - captured
}

/// Builds a Hermitian matrix from its lower triangle (diagonal forced real).
pub(crate) fn hermitian_from_lower(n: usize, lower: &[Complex64]) -> CMatrix {
    let mut out = CMatrix::zeros(n, n);
    for j in 0..n {
        out[(j, j)] = Complex64::new(lower[j + j * n].re, 0.0);
        for i in (j + 1)..n {
            let v = lower[i + j * n];
            out[(i, j)] = v;
            out[(j, i)] = v.conj();
        }
    }
    out
}
