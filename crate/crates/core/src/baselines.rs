//! Classical angular spectra and the exhaustive support search.

use thiserror::Error;

use crate::model::Dictionary;
use crate::solver::find_local_peaks;
use crate::{CMatrix, Complex64};

/// Default cap on the number of supports [`exhaustive_search`] will score.
pub const DEFAULT_EXHAUSTIVE_BUDGET: u64 = 10_000_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BaselineError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("k = {k} must satisfy {lower} <= k < {sensors}")]
    InvalidK { k: usize, lower: usize, sensors: usize },
    #[error("diagonal load {0} must be finite and >= 0")]
    InvalidLoad(f64),
    #[error("loaded covariance is singular or not positive definite")]
    Singular,
    #[error("{total} supports exceed the budget of {budget}; best of the first {} shown", .partial.evaluated)]
    BudgetExceeded {
        total: u128,
        budget: u64,
        partial: ExhaustiveOutcome,
    },
}

/// Linear power per grid angle.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    pub values: Vec<f64>,
    pub angles_deg: Vec<f64>,
}

impl Spectrum {
    fn new(values: Vec<f64>, dict: &Dictionary) -> Self {
        Self {
            values,
            angles_deg: dict.angles().to_vec(),
        }
    }

    /// Up to `k` local peaks, strongest first.
    pub fn peaks(&self, k: usize) -> Vec<usize> {
        find_local_peaks(&self.values, k)
    }
}

fn check_square(sample_cov: &CMatrix, dict: &Dictionary) -> Result<usize, BaselineError> {
    let n = dict.sensors();
    if sample_cov.nrows() != n || sample_cov.ncols() != n {
        return Err(BaselineError::Dimension(format!(
            "covariance is {}x{} but the dictionary has {n} sensors",
            sample_cov.nrows(),
            sample_cov.ncols()
        )));
    }
    Ok(n)
}

/// Quadratic form `a^H M a` for every column, real part.
fn quadratic_forms(m: &CMatrix, dict: &Dictionary) -> Vec<f64> {
    let a = dict.matrix();
    let ma = m * a;
    a.column_iter()
        .zip(ma.column_iter())
        .map(|(ac, mc)| {
            ac.iter()
                .zip(mc.iter())
                .map(|(x, y)| (x.conj() * y).re)
                .sum()
        })
        .collect()
}

/// Conventional beamformer `a_m^H S a_m`.
pub fn cbf_spectrum(sample_cov: &CMatrix, dict: &Dictionary) -> Result<Spectrum, BaselineError> {
    check_square(sample_cov, dict)?;
    let values = quadratic_forms(sample_cov, dict)
        .into_iter()
        .map(|v| v.max(0.0))
        .collect();
    Ok(Spectrum::new(values, dict))
}

/// Loading used by [`mvdr_spectrum`] when none is given: `1e-6 Tr(S) / N`.
pub fn default_diagonal_load(sample_cov: &CMatrix) -> f64 {
    let n = sample_cov.nrows().max(1);
    let trace: f64 = (0..sample_cov.nrows()).map(|i| sample_cov[(i, i)].re).sum();
    1e-6 * trace / n as f64
}

/// Minimum variance distortionless response `1 / (a^H (S + load I)^-1 a)`.
pub fn mvdr_spectrum(
    sample_cov: &CMatrix,
    dict: &Dictionary,
    diagonal_load: f64,
) -> Result<Spectrum, BaselineError> {
    let n = check_square(sample_cov, dict)?;
    if !(diagonal_load >= 0.0 && diagonal_load.is_finite()) {
        return Err(BaselineError::InvalidLoad(diagonal_load));
    }
    let loaded = sample_cov + CMatrix::identity(n, n) * Complex64::new(diagonal_load, 0.0);
    let chol = loaded.cholesky().ok_or(BaselineError::Singular)?;
    let w = chol.solve(dict.matrix());
    let a = dict.matrix();
    let values = a
        .column_iter()
        .zip(w.column_iter())
        .map(|(ac, wc)| {
            let q: f64 = ac.iter().zip(wc.iter()).map(|(x, y)| (x.conj() * y).re).sum();
            if q > 0.0 && q.is_finite() {
                Ok(1.0 / q)
            } else {
                Err(BaselineError::Singular)
            }
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Spectrum::new(values, dict))
}

/// Eigenvectors of the `N - k` smallest eigenvalues of a Hermitian matrix.
/// Equal eigenvalues are ordered by their position in the decomposition.
pub fn noise_subspace(sample_cov: &CMatrix, k: usize) -> CMatrix {
    let n = sample_cov.nrows();
    let eig = sample_cov.clone().symmetric_eigen();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        eig.eigenvalues[i]
            .total_cmp(&eig.eigenvalues[j])
            .then(i.cmp(&j))
    });
    eig.eigenvectors.select_columns(&order[..n - k])
}

/// MUSIC pseudo-spectrum `1 / (a^H U_n U_n^H a)` for `k` sources.
///
/// The denominator is floored at `N * eps` so that steering vectors lying
/// in the signal subspace give a large finite value.
pub fn music_spectrum(
    sample_cov: &CMatrix,
    dict: &Dictionary,
    k: usize,
) -> Result<Spectrum, BaselineError> {
    let n = check_square(sample_cov, dict)?;
    if k < 1 || k >= n {
        return Err(BaselineError::InvalidK {
            k,
            lower: 1,
            sensors: n,
        });
    }
    let un = noise_subspace(sample_cov, k);
    let proj = un.adjoint() * dict.matrix();
    let floor = n as f64 * f64::EPSILON;
    let values = proj
        .column_iter()
        .map(|c| 1.0 / c.norm_squared().max(floor))
        .collect();
    Ok(Spectrum::new(values, dict))
}

/// Best support found by [`exhaustive_search`].
#[derive(Debug, Clone, PartialEq)]
pub struct ExhaustiveOutcome {
    /// Ascending grid indices.
    pub support: Vec<usize>,
    /// `||Y - P Y||_F^2` at the support.
    pub residual: f64,
    /// Number of supports scored.
    pub evaluated: u64,
    pub complete: bool,
}

/// Binomial coefficient, saturating at `u128::MAX`.
pub fn binomial(n: usize, k: usize) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = match acc.checked_mul((n - i) as u128) {
            Some(v) => v / (i as u128 + 1),
            None => return u128::MAX,
        };
    }
    acc
}

/// `Tr(S) - sum_q q^H S q` over an orthonormal basis of the columns of `a`
/// built by modified Gram-Schmidt; columns that are numerically dependent on
/// earlier ones are skipped.
fn projected_residual(sample_cov: &CMatrix, trace: f64, cols: &[&[Complex64]]) -> f64 {
    let n = sample_cov.nrows();
    let mut basis: Vec<Vec<Complex64>> = Vec::with_capacity(cols.len());
    let mut captured = 0.0;
    let mut sq = vec![Complex64::new(0.0, 0.0); n];
    for col in cols {
        let scale: f64 = col.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        let mut v = col.to_vec();
        for q in &basis {
            let proj: Complex64 = q.iter().zip(&v).map(|(a, b)| a.conj() * b).sum();
            for (vi, qi) in v.iter_mut().zip(q) {
                *vi -= qi * proj;
            }
        }
        let norm: f64 = v.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        if norm <= 1e-10 * scale || norm == 0.0 {
            continue;
        }
        for vi in v.iter_mut() {
            *vi /= norm;
        }
        for (i, out) in sq.iter_mut().enumerate() {
            *out = (0..n).map(|j| sample_cov[(i, j)] * v[j]).sum();
        }
        captured += v.iter().zip(&sq).map(|(a, b)| (a.conj() * b).re).sum::<f64>();
        basis.push(v);
    }
    (trace - captured).max(0.0)
}

/// `||Y - A_s A_s^+ Y||_F^2` for a given support.
pub fn support_residual(
    data: &CMatrix,
    dict: &Dictionary,
    support: &[usize],
) -> Result<f64, BaselineError> {
    if data.nrows() != dict.sensors() {
        return Err(BaselineError::Dimension(
            "data rows do not match the dictionary".into(),
        ));
    }
    if let Some(&bad) = support.iter().find(|&&i| i >= dict.len()) {
        return Err(BaselineError::Dimension(format!(
            "support index {bad} out of range"
        )));
    }
    let gram = data * data.adjoint();
    let trace: f64 = (0..gram.nrows()).map(|i| gram[(i, i)].re).sum();
    let n = dict.sensors();
    let a = dict.matrix().as_slice();
    let cols: Vec<&[Complex64]> = support.iter().map(|&m| &a[m * n..(m + 1) * n]).collect();
    Ok(projected_residual(&gram, trace, &cols))
}

/// Support of size `k` minimizing `||Y - A_s A_s^+ Y||_F` over all
/// `C(M, k)` candidates, visited in lexicographic order; a later support
/// replaces the incumbent only if its residual is strictly smaller.
///
/// `budget` caps the number of supports scored (`None` means no cap). When
/// the cap is hit the best support seen so far comes back inside
/// [`BaselineError::BudgetExceeded`].
pub fn exhaustive_search(
    data: &CMatrix,
    dict: &Dictionary,
    k: usize,
    budget: Option<u64>,
) -> Result<ExhaustiveOutcome, BaselineError> {
    let n = dict.sensors();
    let m = dict.len();
    if data.nrows() != n {
        return Err(BaselineError::Dimension(
            "data rows do not match the dictionary".into(),
        ));
    }
    if k > n || k > m {
        return Err(BaselineError::InvalidK {
            k,
            lower: 0,
            sensors: n.min(m) + 1,
        });
    }
    let total = binomial(m, k);
    let gram = data * data.adjoint();
    let trace: f64 = (0..n).map(|i| gram[(i, i)].re).sum();
    let a = dict.matrix().as_slice();

    let mut combo: Vec<usize> = (0..k).collect();
    let mut best = ExhaustiveOutcome {
        support: combo.clone(),
        residual: f64::INFINITY,
        evaluated: 0,
        complete: false,
    };
    let limit = budget.unwrap_or(u64::MAX);
    loop {
        if best.evaluated >= limit {
            return Err(BaselineError::BudgetExceeded {
                total,
                budget: limit,
                partial: best,
            });
        }
        let cols: Vec<&[Complex64]> = combo.iter().map(|&i| &a[i * n..(i + 1) * n]).collect();
        let r = projected_residual(&gram, trace, &cols);
        best.evaluated += 1;
        if r < best.residual {
            best.residual = r;
            best.support.clone_from(&combo);
        }
        // Next combination in lexicographic order.
        let mut i = k;
        loop {
            if i == 0 {
                best.complete = true;
                return Ok(best);
            }
            i -= 1;
            if combo[i] < m - k + i {
                break;
            }
        }
        combo[i] += 1;
        for j in (i + 1)..k {
            combo[j] = combo[j - 1] + 1;
        }
    }
}
