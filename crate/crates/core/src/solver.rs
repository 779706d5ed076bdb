//! Evidence maximization for sparse Bayesian learning.
//!
//! The observation model is `y = A_o x_o + eta`, where the modified noise
//! `eta` collects sensor noise, a random additive dictionary error with column
//! covariance `phi_e I`, and a random weight error with variance `gamma_e` on
//! every grid point. Integrating the errors out gives the noise covariance
//!
//! ```text
//! Sigma_eta = (sigma^2 + phi_e (sum_m gamma_m + M gamma_e)) I + gamma_e A_o A_o^H
//! ```
//!
//! and the data covariance `Sigma_y = Sigma_eta + A_o diag(gamma) A_o^H`. The
//! prior variances `gamma` are found with the multiplicative fixed point
//!
//! ```text
//! gamma_m <- gamma_m * ( Tr(Sy^-1 B_m Sy^-1 S) / Tr(Sy^-1 B_m) )^b,   B_m = phi_e I + a_m a_m^H
//! ```
//!
//! For several dictionaries sharing one `gamma` (SBL-CC) both traces are summed
//! over dictionaries before the ratio is taken; SBL-MC runs every dictionary
//! on its own and averages the converged `gamma`. The noise variance of each
//! dictionary is re-estimated every iteration from the residual of the sample
//! covariance outside the span of the `K` strongest local peaks.

use thiserror::Error;

use crate::linalg::{hermitian_from_lower, range_basis, residual_trace, HermitianFactor};
use crate::model::{Dictionary, SnapshotSet, UncertaintyModel};
use crate::{CMatrix, Complex64};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolverError {
    #[error("invalid solver option `{field}`: {reason}")]
    InvalidOption { field: &'static str, reason: String },
    #[error("invalid problem: {0}")]
    InvalidProblem(String),
    #[error("gamma[{index}] = {value} is negative or not finite")]
    InvalidGamma { index: usize, value: f64 },
    #[error("noise variance {0} must be positive and finite")]
    InvalidNoiseVariance(f64),
    #[error("data covariance is not positive definite at iteration {iteration}")]
    NotPositiveDefinite { iteration: usize },
    #[error("update ratio for grid index {index} is not finite at iteration {iteration}")]
    NonFiniteRatio { index: usize, iteration: usize },
    #[error("log-evidence is not finite at iteration {iteration}")]
    NonFiniteEvidence { iteration: usize },
    #[error("dictionary {index}: {source}")]
    Dictionary {
        index: usize,
        #[source]
        source: Box<SolverError>,
    },
}

impl SolverError {
    /// Iteration at which a numerical breakdown happened, if any.
    pub fn iteration(&self) -> Option<usize> {
        match self {
            SolverError::NotPositiveDefinite { iteration }
            | SolverError::NonFiniteRatio { iteration, .. }
            | SolverError::NonFiniteEvidence { iteration } => Some(*iteration),
            SolverError::Dictionary { source, .. } => source.iteration(),
            _ => None,
        }
    }

    /// True for breakdowns of the iteration (as opposed to bad inputs).
    pub fn is_numerical(&self) -> bool {
        self.iteration().is_some()
    }

    fn at_iteration(self, iteration: usize) -> Self {
        match self {
            SolverError::NotPositiveDefinite { .. } => {
                SolverError::NotPositiveDefinite { iteration }
            }
            SolverError::NonFiniteRatio { index, .. } => {
                SolverError::NonFiniteRatio { index, iteration }
            }
            SolverError::NonFiniteEvidence { .. } => SolverError::NonFiniteEvidence { iteration },
            other => other,
        }
    }
}

fn bad_option(field: &'static str, reason: &str) -> SolverError {
    SolverError::InvalidOption {
        field,
        reason: reason.to_string(),
    }
}

/// Iteration controls.
///
/// Defaults: `epsilon = 1e-6`, at most 3000 iterations, `b = 1`, all `gamma`
/// initialized to 1 and every noise variance to 0.1.
#[derive(Debug, Clone, PartialEq)]
pub struct SolverOptions {
    /// Stop once `||g_new - g_old||_1 / ||g_old||_1 < epsilon`.
    pub epsilon: f64,
    pub max_iterations: usize,
    /// Exponent on the update ratio, `0 < b <= 1`.
    pub exponent_b: f64,
    /// Number of sources used for the noise estimate and the reported support.
    pub k_sources: usize,
    pub gamma_init: f64,
    pub sigma2_init: f64,
    /// Lower clamp applied to `gamma` after every update (0 disables it).
    pub gamma_floor: f64,
    /// Re-estimate the noise variance every iteration; when false it stays at
    /// `sigma2_init`.
    pub estimate_noise: bool,
    pub compute_posterior: bool,
    /// Keep every iterate of `gamma` in [`SblResult::gamma_trajectory`].
    pub record_trajectory: bool,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            epsilon: 1e-6,
            max_iterations: 3000,
            exponent_b: 1.0,
            k_sources: 1,
            gamma_init: 1.0,
            sigma2_init: 0.1,
            gamma_floor: 0.0,
            estimate_noise: true,
            compute_posterior: false,
            record_trajectory: false,
        }
    }
}

impl SolverOptions {
    pub fn with_k(k_sources: usize) -> Self {
        Self {
            k_sources,
            ..Self::default()
        }
    }

    pub fn validate(&self, sensors: usize) -> Result<(), SolverError> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(bad_option("epsilon", "must be finite and > 0"));
        }
        if self.max_iterations < 1 {
            return Err(bad_option("max_iterations", "must be >= 1"));
        }
        if !(self.exponent_b > 0.0 && self.exponent_b <= 1.0) {
            return Err(bad_option("exponent_b", "must lie in (0, 1]"));
        }
        if self.k_sources >= sensors {
            return Err(SolverError::InvalidOption {
                field: "k_sources",
                reason: format!("must be < number of sensors ({sensors})"),
            });
        }
        if !(self.gamma_init > 0.0 && self.gamma_init.is_finite()) {
            return Err(bad_option("gamma_init", "must be finite and > 0"));
        }
        if !(self.sigma2_init > 0.0 && self.sigma2_init.is_finite()) {
            return Err(bad_option("sigma2_init", "must be finite and > 0"));
        }
        if !(self.gamma_floor >= 0.0 && self.gamma_floor.is_finite()) {
            return Err(bad_option("gamma_floor", "must be finite and >= 0"));
        }
        Ok(())
    }
}

/// One or more dictionaries observing a common sparse support.
#[derive(Debug, Clone)]
pub struct SblProblem<'a> {
    dictionaries: Vec<&'a Dictionary>,
    snapshots: Vec<&'a SnapshotSet>,
    uncertainty: Vec<UncertaintyModel>,
}

impl<'a> SblProblem<'a> {
    pub fn new(
        dictionaries: Vec<&'a Dictionary>,
        snapshots: Vec<&'a SnapshotSet>,
        uncertainty: Vec<UncertaintyModel>,
    ) -> Result<Self, SolverError> {
        let f = dictionaries.len();
        if f == 0 {
            return Err(SolverError::InvalidProblem(
                "at least one dictionary is required".into(),
            ));
        }
        if snapshots.len() != f || uncertainty.len() != f {
            return Err(SolverError::InvalidProblem(format!(
                "{f} dictionaries but {} snapshot sets and {} uncertainty models",
                snapshots.len(),
                uncertainty.len()
            )));
        }
        let m = dictionaries[0].len();
        for (i, (d, s)) in dictionaries.iter().zip(&snapshots).enumerate() {
            if d.len() != m {
                return Err(SolverError::InvalidProblem(format!(
                    "dictionary {i} has {} grid points, expected {m}",
                    d.len()
                )));
            }
            if s.sensors() != d.sensors() {
                return Err(SolverError::InvalidProblem(format!(
                    "snapshot set {i} has {} sensors but its dictionary has {}",
                    s.sensors(),
                    d.sensors()
                )));
            }
        }
        for u in &uncertainty {
            u.validate()
                .map_err(|e| SolverError::InvalidProblem(e.to_string()))?;
        }
        Ok(Self {
            dictionaries,
            snapshots,
            uncertainty,
        })
    }

    pub fn single(
        dictionary: &'a Dictionary,
        snapshots: &'a SnapshotSet,
        uncertainty: UncertaintyModel,
    ) -> Result<Self, SolverError> {
        Self::new(vec![dictionary], vec![snapshots], vec![uncertainty])
    }

    pub fn frequencies(&self) -> usize {
        self.dictionaries.len()
    }

    pub fn grid_size(&self) -> usize {
        self.dictionaries[0].len()
    }

    pub fn dictionaries(&self) -> &[&'a Dictionary] {
        &self.dictionaries
    }

    pub fn snapshots(&self) -> &[&'a SnapshotSet] {
        &self.snapshots
    }

    pub fn uncertainty(&self) -> &[UncertaintyModel] {
        &self.uncertainty
    }

    fn part(&self, f: usize) -> SblProblem<'a> {
        SblProblem {
            dictionaries: vec![self.dictionaries[f]],
            snapshots: vec![self.snapshots[f]],
            uncertainty: vec![self.uncertainty[f]],
        }
    }
}

/// Gaussian posterior of the weights for one dictionary.
#[derive(Debug, Clone, PartialEq)]
pub struct Posterior {
    /// `M x L`, column `l` is the posterior mean for snapshot `l`.
    pub means: CMatrix,
    /// `M x M`, shared by all snapshots.
    pub covariance: CMatrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SblResult {
    /// Converged prior variances, read as the angular power spectrum.
    pub gamma: Vec<f64>,
    /// Final noise variance per dictionary.
    pub sigma2: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Log-evidence (constants dropped) of the covariance used in each
    /// iteration, summed over dictionaries. For SBL-MC the per-dictionary
    /// traces are summed index by index, shorter traces holding their last
    /// value.
    pub evidence_trace: Vec<f64>,
    /// Up to `K` local peaks of `gamma`, strongest first.
    pub support: Vec<usize>,
    pub posterior: Option<Vec<Posterior>>,
    /// SBL-MC only: the independent run of every dictionary.
    pub per_dictionary: Vec<SblResult>,
    /// Every iterate of `gamma` when requested, starting with the initial
    /// value. For SBL-MC the per-dictionary iterates are averaged index by
    /// index, finished runs holding their last value.
    pub gamma_trajectory: Vec<Vec<f64>>,
}

fn check_gamma(gamma: &[f64]) -> Result<(), SolverError> {
    match gamma
        .iter()
        .enumerate()
        .find(|(_, g)| !(**g >= 0.0 && g.is_finite()))
    {
        Some((index, &value)) => Err(SolverError::InvalidGamma { index, value }),
        None => Ok(()),
    }
}

fn check_sigma2(sigma2: f64) -> Result<(), SolverError> {
    if sigma2 > 0.0 && sigma2.is_finite() {
        Ok(())
    } else {
        Err(SolverError::InvalidNoiseVariance(sigma2))
    }
}

fn check_len(gamma: &[f64], dict: &Dictionary) -> Result<(), SolverError> {
    if gamma.len() != dict.len() {
        return Err(SolverError::InvalidProblem(format!(
            "gamma has {} entries but the dictionary has {} columns",
            gamma.len(),
            dict.len()
        )));
    }
    Ok(())
}

/// Scalar on the identity of the noise covariance:
/// `sigma^2 + phi_e (sum_m gamma_m + M gamma_e)`.
fn noise_diagonal(gamma: &[f64], uncertainty: &UncertaintyModel, sigma2: f64) -> f64 {
    let m = gamma.len() as f64;
    let total: f64 = gamma.iter().sum();
    sigma2 + uncertainty.phi_e * (total + m * uncertainty.gamma_e)
}

/// Lower triangle of `c I + sum_m w_m a_m a_m^H`, column major.
fn weighted_gram_lower(dict: &Dictionary, weights: &[f64], diagonal: f64) -> Vec<Complex64> {
    let a = dict.matrix();
    let n = a.nrows();
    let mut lower = vec![Complex64::new(0.0, 0.0); n * n];
    if dict.is_steering_exact() {
        // Steering columns give a Hermitian Toeplitz sum: entry (i, j) only
        // depends on i - j and equals sum_m w_m A[i - j, m].
        let mut lags = vec![Complex64::new(0.0, 0.0); n];
        for (m, &w) in weights.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            let col = &a.as_slice()[m * n..(m + 1) * n];
            for (lag, z) in lags.iter_mut().zip(col) {
                *lag += z * w;
            }
        }
        for j in 0..n {
            for i in j..n {
                lower[i + j * n] = lags[i - j];
            }
        }
    } else {
        for (m, &w) in weights.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            let col = &a.as_slice()[m * n..(m + 1) * n];
            for j in 0..n {
                let t = col[j].conj() * w;
                for i in j..n {
                    lower[i + j * n] += col[i] * t;
                }
            }
        }
    }
    for j in 0..n {
        lower[j + j * n] = Complex64::new(lower[j + j * n].re + diagonal, 0.0);
    }
    lower
}

/// `Sigma_eta`, the covariance of sensor noise plus integrated-out errors.
pub fn assemble_noise_covariance(
    gamma: &[f64],
    uncertainty: &UncertaintyModel,
    dict: &Dictionary,
    sigma2: f64,
) -> Result<CMatrix, SolverError> {
    check_len(gamma, dict)?;
    check_gamma(gamma)?;
    check_sigma2(sigma2)?;
    let n = dict.sensors();
    let c = noise_diagonal(gamma, uncertainty, sigma2);
    let mut out = CMatrix::identity(n, n) * Complex64::new(c, 0.0);
    if uncertainty.gamma_e > 0.0 {
        let a = dict.matrix();
        out += a * a.adjoint() * Complex64::new(uncertainty.gamma_e, 0.0);
    }
    Ok(hermitian_from_lower(n, out.as_slice()))
}

/// `Sigma_y = Sigma_eta + A_o diag(gamma) A_o^H`.
pub fn assemble_data_covariance(
    gamma: &[f64],
    uncertainty: &UncertaintyModel,
    dict: &Dictionary,
    sigma2: f64,
) -> Result<CMatrix, SolverError> {
    let mut out = assemble_noise_covariance(gamma, uncertainty, dict, sigma2)?;
    let a = dict.matrix();
    let n = dict.sensors();
    for (m, &g) in gamma.iter().enumerate() {
        if g == 0.0 {
            continue;
        }
        let col = a.column(m);
        for j in 0..n {
            let t = col[j].conj() * g;
            for i in 0..n {
                out[(i, j)] += col[i] * t;
            }
        }
    }
    Ok(hermitian_from_lower(n, out.as_slice()))
}

/// Factored data covariance.
#[derive(Debug, Clone)]
pub struct DataCovariance {
    matrix: CMatrix,
    factor: HermitianFactor,
}

impl DataCovariance {
    /// Factors a Hermitian matrix (its lower triangle is used).
    pub fn from_matrix(matrix: CMatrix) -> Result<Self, SolverError> {
        let factor =
            HermitianFactor::new(&matrix).ok_or(SolverError::NotPositiveDefinite { iteration: 0 })?;
        Ok(Self { matrix, factor })
    }

    pub fn assemble(
        gamma: &[f64],
        uncertainty: &UncertaintyModel,
        dict: &Dictionary,
        sigma2: f64,
    ) -> Result<Self, SolverError> {
        Self::from_matrix(assemble_data_covariance(gamma, uncertainty, dict, sigma2)?)
    }

    pub fn matrix(&self) -> &CMatrix {
        &self.matrix
    }

    pub fn log_det(&self) -> f64 {
        self.factor.log_det()
    }

    /// `Sigma_y^{-1} B`.
    pub fn solve(&self, b: &CMatrix) -> CMatrix {
        self.factor.solve_matrix(b)
    }

    pub fn inverse(&self) -> CMatrix {
        self.factor.inverse()
    }
}

/// Numerator `Tr(Sy^-1 B_m Sy^-1 S)` and denominator `Tr(Sy^-1 B_m)` of the
/// update ratio for every grid index.
#[derive(Debug, Clone, PartialEq)]
pub struct UpdateTraces {
    pub numerator: Vec<f64>,
    pub denominator: Vec<f64>,
    /// `Tr(Sy^-1 S)`, a by-product used by the evidence.
    pub data_fit: f64,
}

/// Adds the trace terms of one dictionary into `numerator` and `denominator`
/// and returns `Tr(Sy^-1 S)`.
///
/// With `v_m = L^-1 a_m` and `H = L^-1 S L^-H` (`Sy = L L^H`) the rank-one
/// parts are `a^H Sy^-1 S Sy^-1 a = v^H H v` and `a^H Sy^-1 a = ||v||^2`; the
/// `phi_e I` part of `B_m` adds the same constant to every grid index.
fn accumulate_traces(
    factor: &HermitianFactor,
    sample_cov: &CMatrix,
    dict: &Dictionary,
    uncertainty: &UncertaintyModel,
    numerator: &mut [f64],
    denominator: &mut [f64],
    scratch: &mut Vec<Complex64>,
) -> f64 {
    let n = factor.dim();
    let m = dict.len();

    // H = L^-1 (L^-1 S)^H, using S = S^H.
    let mut h = sample_cov.clone();
    for mut col in h.column_iter_mut() {
        factor.forward_in_place(col.as_mut_slice());
    }
    let mut h = h.adjoint();
    for mut col in h.column_iter_mut() {
        factor.forward_in_place(col.as_mut_slice());
    }
    let data_fit: f64 = (0..n).map(|i| h[(i, i)].re).sum();

    let (phi_num, phi_den) = if uncertainty.phi_e > 0.0 {
        // Tr(Sy^-1) = ||L^-1||_F^2 and Tr(Sy^-1 S Sy^-1) = Tr(P^H H P), P = L^-1.
        let p = factor.forward_matrix(&CMatrix::identity(n, n));
        let tr_inv = p.norm_squared();
        let hp = &h * &p;
        let tr_sq: f64 = p
            .column_iter()
            .zip(hp.column_iter())
            .map(|(pc, hc)| pc.iter().zip(hc.iter()).map(|(a, b)| (a.conj() * b).re).sum::<f64>())
            .sum();
        (uncertainty.phi_e * tr_sq, uncertainty.phi_e * tr_inv)
    } else {
        (0.0, 0.0)
    };

    scratch.clear();
    scratch.extend_from_slice(dict.matrix().as_slice());
    let hs = h.as_slice();
    for (idx, v) in scratch.chunks_exact_mut(n).enumerate().take(m) {
        factor.forward_in_place(v);
        let mut quad = 0.0;
        let mut norm = 0.0;
        for j in 0..n {
            let vj = v[j];
            let hcol = &hs[j * n..(j + 1) * n];
            norm += vj.norm_sqr();
            quad += hcol[j].re * vj.norm_sqr();
            let mut off = Complex64::new(0.0, 0.0);
            for i in (j + 1)..n {
                off += v[i].conj() * hcol[i];
            }
            quad += 2.0 * (off * vj).re;
        }
        // The quadratic form is nonnegative; rounding can push it just below
        // zero when the covariance is badly conditioned.
        numerator[idx] += phi_num + quad.max(0.0);
        denominator[idx] += phi_den + norm;
    }
    data_fit
}

/// Both traces of the update ratio at a given data covariance.
pub fn update_traces(
    cov: &DataCovariance,
    sample_cov: &CMatrix,
    dict: &Dictionary,
    uncertainty: &UncertaintyModel,
) -> UpdateTraces {
    let m = dict.len();
    let mut numerator = vec![0.0; m];
    let mut denominator = vec![0.0; m];
    let mut scratch = Vec::new();
    let data_fit = accumulate_traces(
        &cov.factor,
        sample_cov,
        dict,
        uncertainty,
        &mut numerator,
        &mut denominator,
        &mut scratch,
    );
    UpdateTraces {
        numerator,
        denominator,
        data_fit,
    }
}

fn apply_ratio(
    gamma_old: &[f64],
    numerator: &[f64],
    denominator: &[f64],
    b: f64,
    floor: f64,
) -> Result<Vec<f64>, SolverError> {
    gamma_old
        .iter()
        .zip(numerator.iter().zip(denominator))
        .enumerate()
        .map(|(index, (&g, (&num, &den)))| {
            let ratio = num / den;
            if !ratio.is_finite() || ratio < 0.0 {
                return Err(SolverError::NonFiniteRatio {
                    index,
                    iteration: 0,
                });
            }
            let factor = if b == 1.0 { ratio } else { ratio.powf(b) };
            Ok((g * factor).max(floor))
        })
        .collect()
}

/// One fixed-point update of `gamma` at the given data covariance (which must
/// be `Sigma_y(gamma_old)` for the step to be the SBL iteration).
pub fn gamma_update_step(
    gamma_old: &[f64],
    cov: &DataCovariance,
    sample_cov: &CMatrix,
    dict: &Dictionary,
    uncertainty: &UncertaintyModel,
    b: f64,
) -> Result<Vec<f64>, SolverError> {
    check_len(gamma_old, dict)?;
    check_gamma(gamma_old)?;
    if !(b > 0.0 && b <= 1.0) {
        return Err(bad_option("exponent_b", "must lie in (0, 1]"));
    }
    let traces = update_traces(cov, sample_cov, dict, uncertainty);
    apply_ratio(gamma_old, &traces.numerator, &traces.denominator, b, 0.0)
}

/// Stochastic maximum likelihood noise variance
/// `Tr((I - A_s A_s^+) S) / (N - k)` for support `s` of size `k`.
///
/// The result is clamped below at `1e-12 Tr(S) / N` (and the smallest positive
/// double) so that the data covariance stays positive definite.
pub fn estimate_noise(
    sample_cov: &CMatrix,
    dict: &Dictionary,
    support: &[usize],
    k: usize,
) -> Result<f64, SolverError> {
    let n = dict.sensors();
    if k >= n {
        return Err(SolverError::InvalidOption {
            field: "k_sources",
            reason: format!("k = {k} must be < number of sensors ({n})"),
        });
    }
    if support.len() != k {
        return Err(SolverError::InvalidProblem(format!(
            "support has {} indices, expected {k}",
            support.len()
        )));
    }
    if let Some(&bad) = support.iter().find(|&&i| i >= dict.len()) {
        return Err(SolverError::InvalidProblem(format!(
            "support index {bad} out of range for {} grid points",
            dict.len()
        )));
    }
    if sample_cov.nrows() != n || sample_cov.ncols() != n {
        return Err(SolverError::InvalidProblem(
            "sample covariance does not match the dictionary".into(),
        ));
    }
    Ok(noise_from_support(sample_cov, dict, support))
}

fn noise_from_support(sample_cov: &CMatrix, dict: &Dictionary, support: &[usize]) -> f64 {
    let n = dict.sensors();
    let trace: f64 = (0..n).map(|i| sample_cov[(i, i)].re).sum();
    let residual = if support.is_empty() {
        trace
    } else {
        residual_trace(sample_cov, &range_basis(&dict.columns(support)))
    };
    let estimate = residual / (n - support.len()) as f64;
    let floor = (1e-12 * trace / n as f64).max(f64::MIN_POSITIVE);
    estimate.max(floor)
}

/// Local maxima of `values`, strongest first, at most `k` of them.
///
/// A run of equal values counts once (at its first index) if it has at least
/// one neighbour and every neighbour is strictly smaller; endpoints compare
/// against their single neighbour. Equal peak values are ordered by index.
pub fn find_local_peaks(values: &[f64], k: usize) -> Vec<usize> {
    let m = values.len();
    let mut peaks = Vec::new();
    let mut start = 0;
    while start < m {
        let v = values[start];
        let mut end = start;
        while end + 1 < m && values[end + 1] == v {
            end += 1;
        }
        let left = start == 0 || values[start - 1] < v;
        let right = end + 1 == m || values[end + 1] < v;
        let has_neighbour = start > 0 || end + 1 < m;
        if left && right && has_neighbour {
            peaks.push(start);
        }
        start = end + 1;
    }
    peaks.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    peaks.truncate(k);
    peaks
}

/// `-L log det Sigma_y - L Tr(Sigma_y^-1 S)`, constants dropped.
pub fn log_evidence(
    gamma: &[f64],
    sigma2: f64,
    dict: &Dictionary,
    uncertainty: &UncertaintyModel,
    snapshots: &SnapshotSet,
) -> Result<f64, SolverError> {
    let cov = DataCovariance::assemble(gamma, uncertainty, dict, sigma2)?;
    let fit: f64 = {
        let x = cov.solve(snapshots.sample_covariance());
        (0..x.nrows()).map(|i| x[(i, i)].re).sum()
    };
    let l = snapshots.snapshots() as f64;
    let value = -l * (cov.log_det() + fit);
    if value.is_finite() {
        Ok(value)
    } else {
        Err(SolverError::NonFiniteEvidence { iteration: 0 })
    }
}

/// Gradient of [`log_evidence`] in `gamma`:
/// `L (Tr(Sy^-1 B_m Sy^-1 S) - Tr(Sy^-1 B_m))`.
pub fn log_evidence_gradient(
    gamma: &[f64],
    sigma2: f64,
    dict: &Dictionary,
    uncertainty: &UncertaintyModel,
    snapshots: &SnapshotSet,
) -> Result<Vec<f64>, SolverError> {
    let cov = DataCovariance::assemble(gamma, uncertainty, dict, sigma2)?;
    let traces = update_traces(&cov, snapshots.sample_covariance(), dict, uncertainty);
    let l = snapshots.snapshots() as f64;
    Ok(traces
        .numerator
        .iter()
        .zip(&traces.denominator)
        .map(|(num, den)| l * (num - den))
        .collect())
}

/// Posterior mean `Gamma A^H Sy^-1 y_l` and covariance
/// `Gamma - Gamma A^H Sy^-1 A Gamma`, with `Sy` including the uncertainty
/// terms.
pub fn posterior(
    gamma: &[f64],
    sigma2: f64,
    dict: &Dictionary,
    uncertainty: &UncertaintyModel,
    data: &CMatrix,
) -> Result<Posterior, SolverError> {
    if data.nrows() != dict.sensors() {
        return Err(SolverError::InvalidProblem(
            "data rows do not match the dictionary".into(),
        ));
    }
    let cov = DataCovariance::assemble(gamma, uncertainty, dict, sigma2)?;
    let a = dict.matrix();
    let w = cov.solve(a);
    let mut means = w.adjoint() * data;
    for (m, mut row) in means.row_iter_mut().enumerate() {
        row *= Complex64::new(gamma[m], 0.0);
    }
    let gram = a.adjoint() * &w;
    let size = gamma.len();
    let mut covariance = CMatrix::zeros(size, size);
    for j in 0..size {
        for i in 0..size {
            let g = (gram[(i, j)] + gram[(j, i)].conj()) * 0.5;
            let mut v = -g * (gamma[i] * gamma[j]);
            if i == j {
                v = Complex64::new(gamma[i] + v.re, 0.0);
            }
            covariance[(i, j)] = v;
        }
    }
    Ok(Posterior { means, covariance })
}

/// Per-dictionary iteration state.
struct Channel<'a> {
    dict: &'a Dictionary,
    snapshots: &'a SnapshotSet,
    uncertainty: UncertaintyModel,
    sigma2: f64,
    noise_support: Option<Vec<usize>>,
}

impl Channel<'_> {
    fn accumulate(
        &self,
        gamma: &[f64],
        numerator: &mut [f64],
        denominator: &mut [f64],
        scratch: &mut Vec<Complex64>,
    ) -> Result<f64, SolverError> {
        let weights: Vec<f64> = gamma.iter().map(|g| g + self.uncertainty.gamma_e).collect();
        let diagonal = noise_diagonal(gamma, &self.uncertainty, self.sigma2);
        let lower = weighted_gram_lower(self.dict, &weights, diagonal);
        let factor = HermitianFactor::factor_in_place(self.dict.sensors(), lower)
            .ok_or(SolverError::NotPositiveDefinite { iteration: 0 })?;
        let fit = accumulate_traces(
            &factor,
            self.snapshots.sample_covariance(),
            self.dict,
            &self.uncertainty,
            numerator,
            denominator,
            scratch,
        );
        Ok(-(self.snapshots.snapshots() as f64) * (factor.log_det() + fit))
    }

    fn update_noise(&mut self, support: &[usize]) {
        if self.noise_support.as_deref() == Some(support) {
            return;
        }
        self.sigma2 = noise_from_support(self.snapshots.sample_covariance(), self.dict, support);
        self.noise_support = Some(support.to_vec());
    }
}

fn l1_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

/// Shared-gamma iteration over every dictionary of `problem`.
fn iterate(problem: &SblProblem<'_>, options: &SolverOptions) -> Result<SblResult, SolverError> {
    let min_sensors = problem
        .dictionaries
        .iter()
        .map(|d| d.sensors())
        .min()
        .unwrap_or(0);
    options.validate(min_sensors)?;
    let m = problem.grid_size();
    let mut channels: Vec<Channel<'_>> = problem
        .dictionaries
        .iter()
        .zip(&problem.snapshots)
        .zip(&problem.uncertainty)
        .map(|((dict, snapshots), uncertainty)| Channel {
            dict,
            snapshots,
            uncertainty: *uncertainty,
            sigma2: options.sigma2_init,
            noise_support: None,
        })
        .collect();

    let mut gamma_old = vec![options.gamma_init; m];
    let mut numerator = vec![0.0; m];
    let mut denominator = vec![0.0; m];
    let mut scratch = Vec::new();
    let mut evidence_trace = Vec::new();
    let mut trajectory = Vec::new();
    if options.record_trajectory {
        trajectory.push(gamma_old.clone());
    }
    let mut converged = false;
    let mut iterations = 0;

    for iteration in 1..=options.max_iterations {
        iterations = iteration;
        numerator.fill(0.0);
        denominator.fill(0.0);
        let mut evidence = 0.0;
        for (index, channel) in channels.iter().enumerate() {
            let value = channel
                .accumulate(&gamma_old, &mut numerator, &mut denominator, &mut scratch)
                .map_err(|e| wrap(problem, index, e.at_iteration(iteration)))?;
            evidence += value;
        }
        if !evidence.is_finite() {
            return Err(SolverError::NonFiniteEvidence { iteration });
        }
        evidence_trace.push(evidence);

        let gamma_new = apply_ratio(
            &gamma_old,
            &numerator,
            &denominator,
            options.exponent_b,
            options.gamma_floor,
        )
        .map_err(|e| e.at_iteration(iteration))?;

        if options.estimate_noise {
            let peaks = find_local_peaks(&gamma_new, options.k_sources);
            for channel in &mut channels {
                channel.update_noise(&peaks);
            }
        }
        if options.record_trajectory {
            trajectory.push(gamma_new.clone());
        }

        let scale: f64 = gamma_old.iter().sum();
        let change = l1_distance(&gamma_new, &gamma_old);
        gamma_old = gamma_new;
        if scale == 0.0 || change / scale < options.epsilon {
            converged = true;
            break;
        }
    }

    let gamma = gamma_old;
    let support = find_local_peaks(&gamma, options.k_sources);
    let sigma2: Vec<f64> = channels.iter().map(|c| c.sigma2).collect();
    let posterior = if options.compute_posterior {
        Some(
            channels
                .iter()
                .map(|c| posterior(&gamma, c.sigma2, c.dict, &c.uncertainty, c.snapshots.data()))
                .collect::<Result<Vec<_>, _>>()?,
        )
    } else {
        None
    };
    Ok(SblResult {
        gamma,
        sigma2,
        iterations,
        converged,
        evidence_trace,
        support,
        posterior,
        per_dictionary: Vec::new(),
        gamma_trajectory: trajectory,
    })
}

fn wrap(problem: &SblProblem<'_>, index: usize, error: SolverError) -> SolverError {
    if problem.frequencies() == 1 {
        error
    } else {
        SolverError::Dictionary {
            index,
            source: Box::new(error),
        }
    }
}

/// Single-dictionary SBL (SBL-A and SBL-x through the uncertainty model).
pub fn run_sbl(problem: &SblProblem<'_>, options: &SolverOptions) -> Result<SblResult, SolverError> {
    if problem.frequencies() != 1 {
        return Err(SolverError::InvalidProblem(format!(
            "run_sbl takes exactly one dictionary, got {}",
            problem.frequencies()
        )));
    }
    iterate(problem, options)
}

/// Multi-dictionary SBL with one prior shared by all dictionaries (SBL-CC).
pub fn run_sbl_cc(
    problem: &SblProblem<'_>,
    options: &SolverOptions,
) -> Result<SblResult, SolverError> {
    iterate(problem, options)
}

/// Multi-dictionary SBL with a prior per dictionary (SBL-MC): every
/// dictionary converges on its own and the result is the mean `gamma`.
pub fn run_sbl_mc(
    problem: &SblProblem<'_>,
    options: &SolverOptions,
) -> Result<SblResult, SolverError> {
    let f = problem.frequencies();
    let runs = (0..f)
        .map(|index| {
            iterate(&problem.part(index), options).map_err(|e| SolverError::Dictionary {
                index,
                source: Box::new(e),
            })
        })
        .collect::<Result<Vec<_>, _>>()?;

    let m = problem.grid_size();
    let mut gamma = vec![0.0; m];
    for run in &runs {
        for (acc, g) in gamma.iter_mut().zip(&run.gamma) {
            *acc += g;
        }
    }
    for g in &mut gamma {
        *g /= f as f64;
    }

    let longest = runs.iter().map(|r| r.evidence_trace.len()).max().unwrap_or(0);
    let evidence_trace = (0..longest)
        .map(|i| {
            runs.iter()
                .map(|r| {
                    r.evidence_trace
                        .get(i)
                        .or(r.evidence_trace.last())
                        .copied()
                        .unwrap_or(0.0)
                })
                .sum()
        })
        .collect();
    let steps = runs.iter().map(|r| r.gamma_trajectory.len()).max().unwrap_or(0);
    let gamma_trajectory = (0..steps)
        .map(|i| {
            let mut mean = vec![0.0; m];
            for run in &runs {
                let t = &run.gamma_trajectory;
                for (acc, g) in mean.iter_mut().zip(&t[i.min(t.len() - 1)]) {
                    *acc += g;
                }
            }
            mean.iter_mut().for_each(|g| *g /= f as f64);
            mean
        })
        .collect();
    let posterior = if options.compute_posterior {
        Some(
            runs.iter()
                .flat_map(|r| r.posterior.clone().unwrap_or_default())
                .collect(),
        )
    } else {
        None
    };
    Ok(SblResult {
        support: find_local_peaks(&gamma, options.k_sources),
        gamma,
        sigma2: runs.iter().map(|r| r.sigma2[0]).collect(),
        iterations: runs.iter().map(|r| r.iterations).max().unwrap_or(0),
        converged: runs.iter().all(|r| r.converged),
        evidence_trace,
        posterior,
        gamma_trajectory,
        per_dictionary: runs,
    })
}
