//! Array geometry, dictionaries, synthetic scenes and snapshot data.
//!
//! Angles are in degrees at every public boundary and converted to radians only
//! when a phase is evaluated. Every generator is a pure function of its inputs
//! and an integer seed (see [`crate::rng`]).

use std::f64::consts::PI;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{keyed_stream, LANE_PERTURBATION, LANE_SNAPSHOT};
use crate::{CMatrix, CVector, Complex64};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid value for `{field}`: {reason}")]
    InvalidField { field: String, reason: String },
    #[error("source {index} at {angle_deg} deg lies outside the grid [{lo}, {hi}] deg")]
    SourceOutsideGrid {
        index: usize,
        angle_deg: f64,
        lo: f64,
        hi: f64,
    },
    #[error("expected {expected} dictionaries (one per frequency), got {actual}")]
    FrequencyMismatch { expected: usize, actual: usize },
}

pub(crate) fn invalid(field: &str, reason: impl Into<String>) -> ModelError {
    ModelError::InvalidField {
        field: field.to_string(),
        reason: reason.into(),
    }
}

/// Second-order statistics of the error terms.
///
/// `phi_e` is the variance of the additive error on every dictionary column
/// (column error covariance `phi_e * I`), `gamma_e` the variance of the weight
/// error on every grid point. Both zero gives plain SBL; `gamma_e = 0` alone is
/// SBL-A and `phi_e = 0` alone is SBL-x.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UncertaintyModel {
    #[serde(default)]
    pub phi_e: f64,
    #[serde(default)]
    pub gamma_e: f64,
}

impl UncertaintyModel {
    pub const NONE: UncertaintyModel = UncertaintyModel {
        phi_e: 0.0,
        gamma_e: 0.0,
    };

    pub fn new(phi_e: f64, gamma_e: f64) -> Result<Self, ModelError> {
        let model = Self { phi_e, gamma_e };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if !(self.phi_e.is_finite() && self.phi_e >= 0.0) {
            return Err(invalid("phi_e", "must be finite and >= 0"));
        }
        if !(self.gamma_e.is_finite() && self.gamma_e >= 0.0) {
            return Err(invalid("gamma_e", "must be finite and >= 0"));
        }
        Ok(())
    }
}

/// Plane-wave response of an `sensors`-element uniform linear array.
///
/// Element `n` is `exp(j 2 pi n (d/lambda) sin(theta))`; element 0 is exactly 1.
pub fn steering_vector(theta_deg: f64, sensors: usize, spacing_wavelengths: f64) -> CVector {
    let increment = 2.0 * PI * spacing_wavelengths * theta_deg.to_radians().sin();
    CVector::from_fn(sensors, |n, _| {
        Complex64::from_polar(1.0, increment * n as f64)
    })
}

/// Sensing matrix over an angle grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Dictionary {
    matrix: CMatrix,
    angles_deg: Vec<f64>,
    spacing_wavelengths: f64,
    /// Columns are exact steering vectors (not perturbed), so `A diag(w) A^H`
    /// is Hermitian Toeplitz.
    steering_exact: bool,
}

impl Dictionary {
    /// Builds a dictionary on an explicit, strictly increasing angle grid.
    pub fn from_angles(
        angles_deg: Vec<f64>,
        sensors: usize,
        spacing_wavelengths: f64,
    ) -> Result<Self, ModelError> {
        if sensors == 0 {
            return Err(invalid("sensors", "must be >= 1"));
        }
        if !(spacing_wavelengths.is_finite() && spacing_wavelengths > 0.0) {
            return Err(invalid("spacing_wavelengths", "must be finite and > 0"));
        }
        if angles_deg.is_empty() {
            return Err(invalid("angles", "grid is empty"));
        }
        if angles_deg.iter().any(|a| !a.is_finite()) {
            return Err(invalid("angles", "grid contains non-finite angles"));
        }
        if angles_deg.windows(2).any(|w| w[1] <= w[0]) {
            return Err(invalid("angles", "grid must be strictly increasing"));
        }
        let mut matrix = CMatrix::zeros(sensors, angles_deg.len());
        for (m, &angle) in angles_deg.iter().enumerate() {
            matrix.set_column(m, &steering_vector(angle, sensors, spacing_wavelengths));
        }
        Ok(Self {
            matrix,
            angles_deg,
            spacing_wavelengths,
            steering_exact: true,
        })
    }

    pub fn matrix(&self) -> &CMatrix {
        &self.matrix
    }

    pub fn angles(&self) -> &[f64] {
        &self.angles_deg
    }

    pub fn sensors(&self) -> usize {
        self.matrix.nrows()
    }

    /// Number of grid angles `M`.
    pub fn len(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.matrix.ncols() == 0
    }

    pub fn spacing_wavelengths(&self) -> f64 {
        self.spacing_wavelengths
    }

    /// False once the columns have been perturbed away from steering vectors.
    pub fn is_steering_exact(&self) -> bool {
        self.steering_exact
    }

    /// Index of the grid angle closest to `angle_deg` (lower index on ties).
    pub fn nearest_index(&self, angle_deg: f64) -> usize {
        let angles = &self.angles_deg;
        let upper = angles.partition_point(|&a| a < angle_deg);
        if upper == 0 {
            return 0;
        }
        if upper == angles.len() {
            return angles.len() - 1;
        }
        if angle_deg - angles[upper - 1] <= angles[upper] - angle_deg {
            upper - 1
        } else {
            upper
        }
    }

    /// Sub-matrix made of the listed columns.
    pub fn columns(&self, indices: &[usize]) -> CMatrix {
        self.matrix.select_columns(indices)
    }
}

/// Builds the steering dictionary on `start, start + step, ..., <= stop`.
///
/// The grid has `floor((stop - start) / step) + 1` points; angle `i` is
/// evaluated as `start + i * step` (never accumulated).
pub fn build_dictionary(
    grid_start_deg: f64,
    grid_stop_deg: f64,
    grid_step_deg: f64,
    sensors: usize,
    spacing_wavelengths: f64,
) -> Result<Dictionary, ModelError> {
    if !(grid_step_deg.is_finite() && grid_step_deg > 0.0) {
        return Err(invalid("grid_step_deg", "must be finite and > 0"));
    }
    if !(grid_start_deg.is_finite() && grid_stop_deg.is_finite()) {
        return Err(invalid("grid_start_deg", "grid bounds must be finite"));
    }
    if grid_stop_deg < grid_start_deg {
        return Err(invalid("grid_stop_deg", "must be >= grid_start_deg"));
    }
    let span = (grid_stop_deg - grid_start_deg) / grid_step_deg;
    // Tolerate representation error so that e.g. a 0.1 deg step lands on stop.
    let count = (span + 1e-9).floor() as usize + 1;
    let angles = (0..count)
        .map(|i| grid_start_deg + i as f64 * grid_step_deg)
        .collect();
    Dictionary::from_angles(angles, sensors, spacing_wavelengths)
}

/// Array geometry and angle grid shared by every frequency of an experiment.
///
/// `spacing_wavelengths` is the sensor spacing in wavelengths at the reference
/// frequency; at relative frequency `f / f_1` the spacing is scaled by it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArraySpec {
    pub grid_start_deg: f64,
    pub grid_stop_deg: f64,
    pub grid_step_deg: f64,
    pub sensors: usize,
    pub spacing_wavelengths: f64,
}

impl Default for ArraySpec {
    fn default() -> Self {
        Self {
            grid_start_deg: -90.0,
            grid_stop_deg: 90.0,
            grid_step_deg: 1.0,
            sensors: 20,
            spacing_wavelengths: 0.5,
        }
    }
}

impl ArraySpec {
    pub fn dictionary(&self, relative_frequency: f64) -> Result<Dictionary, ModelError> {
        if !(relative_frequency.is_finite() && relative_frequency > 0.0) {
            return Err(invalid("frequencies", "relative frequencies must be > 0"));
        }
        build_dictionary(
            self.grid_start_deg,
            self.grid_stop_deg,
            self.grid_step_deg,
            self.sensors,
            self.spacing_wavelengths * relative_frequency,
        )
    }

    /// One dictionary per relative frequency, sharing the grid.
    pub fn dictionaries(&self, relative_frequencies: &[f64]) -> Result<Vec<Dictionary>, ModelError> {
        relative_frequencies
            .iter()
            .map(|&f| self.dictionary(f))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceSpec {
    pub angle_deg: f64,
    pub power_db: f64,
}

/// How per-snapshot source amplitudes are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AmplitudeModel {
    /// `sqrt(P) exp(j phi)` with `phi` uniform on `[0, 2 pi)`.
    #[default]
    ConstantMagnitudeRandomPhase,
    /// Circularly symmetric complex Gaussian with variance `P`.
    ComplexGaussian,
}

/// Ground truth for a simulation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub sources: Vec<SourceSpec>,
    #[serde(default)]
    pub amplitude_model: AmplitudeModel,
    /// Array SNR per snapshot referenced to the weakest source. `"inf"` on disk
    /// means noise free.
    #[serde(with = "snr_serde")]
    pub snr_db: f64,
    pub snapshots: usize,
    /// Relative frequencies `f / f_1`.
    #[serde(default = "default_frequencies")]
    pub frequencies: Vec<f64>,
}

fn default_frequencies() -> Vec<f64> {
    vec![1.0]
}

impl SceneSpec {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.sources.is_empty() {
            return Err(invalid("sources", "at least one source is required"));
        }
        for source in &self.sources {
            if !source.angle_deg.is_finite() {
                return Err(invalid("sources.angle_deg", "must be finite"));
            }
            if !source.power_db.is_finite() {
                return Err(invalid("sources.power_db", "must be finite"));
            }
        }
        if self.snr_db.is_nan() || self.snr_db == f64::NEG_INFINITY {
            return Err(invalid("snr_db", "must be a number or +inf"));
        }
        if self.snapshots < 1 {
            return Err(invalid("snapshots", "must be >= 1"));
        }
        if self.frequencies.is_empty() {
            return Err(invalid("frequencies", "at least one frequency is required"));
        }
        if self
            .frequencies
            .iter()
            .any(|f| !(f.is_finite() && *f > 0.0))
        {
            return Err(invalid("frequencies", "relative frequencies must be > 0"));
        }
        Ok(())
    }

    /// Index of the weakest source (lowest power, lowest index on ties).
    pub fn weakest_source(&self) -> usize {
        let mut best = 0;
        for (k, source) in self.sources.iter().enumerate() {
            if source.power_db < self.sources[best].power_db {
                best = k;
            }
        }
        best
    }

    /// Per-element noise variance realizing the requested SNR.
    ///
    /// With `E||a x||^2 = N P_ws` and `E||n||^2 = N sigma^2` the sensor count
    /// cancels and `sigma^2 = P_ws / 10^(snr/10)`.
    pub fn noise_variance(&self) -> f64 {
        let weakest = db_to_linear(self.sources[self.weakest_source()].power_db);
        weakest / db_to_linear(self.snr_db)
    }
}

pub fn db_to_linear(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

mod snr_serde {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(value: &f64, serializer: S) -> Result<S::Ok, S::Error> {
        if value.is_infinite() && value.is_sign_positive() {
            serializer.serialize_str("inf")
        } else {
            serializer.serialize_f64(*value)
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Number(f64),
        Text(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(deserializer: D) -> Result<f64, D::Error> {
        match Repr::deserialize(deserializer)? {
            Repr::Number(v) => Ok(v),
            Repr::Text(t) => match t.as_str() {
                "inf" | "+inf" | "infinity" | "+infinity" => Ok(f64::INFINITY),
                other => Err(serde::de::Error::custom(format!(
                    "snr_db: expected a number or \"inf\", got {other:?}"
                ))),
            },
        }
    }
}

/// Observation matrix with its sample covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct SnapshotSet {
    data: CMatrix,
    sample_covariance: CMatrix,
}

impl SnapshotSet {
    pub fn from_data(data: CMatrix) -> Result<Self, ModelError> {
        if data.ncols() < 1 {
            return Err(invalid("snapshots", "must be >= 1"));
        }
        if data.nrows() < 1 {
            return Err(invalid("sensors", "must be >= 1"));
        }
        if data.iter().any(|z| !(z.re.is_finite() && z.im.is_finite())) {
            return Err(invalid("data", "contains non-finite entries"));
        }
        let sample_covariance = sample_covariance(&data);
        Ok(Self {
            data,
            sample_covariance,
        })
    }

    pub fn data(&self) -> &CMatrix {
        &self.data
    }

    pub fn sample_covariance(&self) -> &CMatrix {
        &self.sample_covariance
    }

    pub fn sensors(&self) -> usize {
        self.data.nrows()
    }

    pub fn snapshots(&self) -> usize {
        self.data.ncols()
    }
}

/// `(1/L) Y Y^H`, Hermitian by construction (the lower triangle mirrors the
/// upper and the diagonal is exactly real).
pub fn sample_covariance(data: &CMatrix) -> CMatrix {
    let (n, l) = data.shape();
    let mut s = CMatrix::zeros(n, n);
    if l == 0 {
        return s;
    }
    let scale = 1.0 / l as f64;
    for j in 0..n {
        for i in 0..=j {
            let mut acc = Complex64::new(0.0, 0.0);
            for t in 0..l {
                acc += data[(i, t)] * data[(j, t)].conj();
            }
            acc *= scale;
            if i == j {
                s[(i, i)] = Complex64::new(acc.re, 0.0);
            } else {
                s[(i, j)] = acc;
                s[(j, i)] = acc.conj();
            }
        }
    }
    s
}

/// Redraw policy for multiplicative array errors in mismatch studies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbationRedraw {
    /// One error matrix per run, shared by all snapshots.
    #[default]
    PerRun,
    /// A fresh error matrix for every snapshot.
    PerSnapshot,
}

/// Multiplicative phase error applied to the generating dictionary.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Mismatch {
    pub delta0: f64,
    pub redraw: PerturbationRedraw,
}

impl Default for Mismatch {
    fn default() -> Self {
        Self {
            delta0: 0.0,
            redraw: PerturbationRedraw::PerRun,
        }
    }
}

fn uniform_phases(rng: &mut ChaCha8Rng, count: usize, delta0: f64) -> Vec<Complex64> {
    (0..count)
        .map(|_| {
            let u: f64 = rng.random();
            Complex64::from_polar(1.0, delta0 * (u - 0.5))
        })
        .collect()
}

/// `A = A_o * A_e` (entrywise) with `A_e(n, m) = exp(j delta)` and `delta`
/// uniform on `[-delta0/2, delta0/2]`.
///
/// With `shared_per_column` one phase is drawn per sensor row and reused by
/// every column; otherwise every entry gets its own phase.
pub fn apply_multiplicative_perturbation(
    dict: &Dictionary,
    delta0: f64,
    seed: u64,
    shared_per_column: bool,
) -> Result<Dictionary, ModelError> {
    if !(delta0.is_finite() && delta0 >= 0.0) {
        return Err(invalid("delta0", "must be finite and >= 0"));
    }
    if delta0 == 0.0 {
        return Ok(dict.clone());
    }
    let mut rng = keyed_stream(seed, 0, LANE_PERTURBATION, 0);
    let (n, m) = dict.matrix.shape();
    let mut matrix = dict.matrix.clone();
    if shared_per_column {
        let phases = uniform_phases(&mut rng, n, delta0);
        for col in 0..m {
            for (row, phase) in phases.iter().enumerate() {
                matrix[(row, col)] *= phase;
            }
        }
    } else {
        let phases = uniform_phases(&mut rng, n * m, delta0);
        for (entry, phase) in matrix.iter_mut().zip(&phases) {
            *entry *= phase;
        }
    }
    Ok(Dictionary {
        matrix,
        angles_deg: dict.angles_deg.clone(),
        spacing_wavelengths: dict.spacing_wavelengths,
        steering_exact: false,
    })
}

/// Synthesis output kept in separate pieces (used to audit SNR calibration).
#[derive(Debug, Clone)]
pub struct SynthesizedScene {
    /// Grid index each source was snapped to.
    pub source_indices: Vec<usize>,
    /// `K x L` source amplitudes.
    pub amplitudes: CMatrix,
    /// `N x L` sensor noise.
    pub noise: CMatrix,
    pub noise_variance: f64,
    pub snapshots: SnapshotSet,
}

/// Snaps every source onto the dictionary grid.
pub fn snap_sources(scene: &SceneSpec, dict: &Dictionary) -> Result<Vec<usize>, ModelError> {
    let angles = dict.angles();
    let (lo, hi) = (angles[0], angles[angles.len() - 1]);
    scene
        .sources
        .iter()
        .enumerate()
        .map(|(index, s)| {
            if s.angle_deg < lo - 1e-9 || s.angle_deg > hi + 1e-9 {
                Err(ModelError::SourceOutsideGrid {
                    index,
                    angle_deg: s.angle_deg,
                    lo,
                    hi,
                })
            } else {
                Ok(dict.nearest_index(s.angle_deg))
            }
        })
        .collect()
}

fn synthesize_lane(
    scene: &SceneSpec,
    dict: &Dictionary,
    seed: u64,
    lane: u64,
    mismatch: Option<&Mismatch>,
) -> Result<SynthesizedScene, ModelError> {
    scene.validate()?;
    let source_indices = snap_sources(scene, dict)?;
    let n = dict.sensors();
    let l = scene.snapshots;
    let k = scene.sources.len();
    let noise_variance = scene.noise_variance();
    let noise_scale = (noise_variance / 2.0).sqrt();
    let steering = dict.columns(&source_indices);
    let per_run_phases = match mismatch {
        Some(mm) if mm.delta0 > 0.0 && mm.redraw == PerturbationRedraw::PerRun => Some(
            uniform_phases(&mut keyed_stream(seed, lane, LANE_PERTURBATION, 0), n, mm.delta0),
        ),
        _ => None,
    };

    let mut amplitudes = CMatrix::zeros(k, l);
    let mut noise = CMatrix::zeros(n, l);
    let mut data = CMatrix::zeros(n, l);
    for t in 0..l {
        let mut rng = keyed_stream(seed, lane, LANE_SNAPSHOT, t as u64);
        for (src, spec) in scene.sources.iter().enumerate() {
            let power = db_to_linear(spec.power_db);
            amplitudes[(src, t)] = match scene.amplitude_model {
                AmplitudeModel::ConstantMagnitudeRandomPhase => {
                    let phase: f64 = rng.random::<f64>() * 2.0 * PI;
                    Complex64::from_polar(power.sqrt(), phase)
                }
                AmplitudeModel::ComplexGaussian => {
                    let s = (power / 2.0).sqrt();
                    let re: f64 = rng.sample(StandardNormal);
                    let im: f64 = rng.sample(StandardNormal);
                    Complex64::new(s * re, s * im)
                }
            };
        }
        for row in 0..n {
            let re: f64 = rng.sample(StandardNormal);
            let im: f64 = rng.sample(StandardNormal);
            noise[(row, t)] = Complex64::new(noise_scale * re, noise_scale * im);
        }
        let snapshot_phases = match mismatch {
            Some(mm) if mm.delta0 > 0.0 && mm.redraw == PerturbationRedraw::PerSnapshot => Some(
                uniform_phases(
                    &mut keyed_stream(seed, lane, LANE_PERTURBATION, 1 + t as u64),
                    n,
                    mm.delta0,
                ),
            ),
            _ => None,
        };
        let phases = snapshot_phases.as_ref().or(per_run_phases.as_ref());
        for row in 0..n {
            let mut signal = Complex64::new(0.0, 0.0);
            for src in 0..k {
                signal += steering[(row, src)] * amplitudes[(src, t)];
            }
            if let Some(phases) = phases {
                signal *= phases[row];
            }
            data[(row, t)] = signal + noise[(row, t)];
        }
    }
    let snapshots = SnapshotSet::from_data(data)?;
    Ok(SynthesizedScene {
        source_indices,
        amplitudes,
        noise,
        noise_variance,
        snapshots,
    })
}

/// Synthesizes one frequency and keeps the amplitude and noise realizations.
pub fn synthesize_components(
    scene: &SceneSpec,
    dict: &Dictionary,
    seed: u64,
) -> Result<SynthesizedScene, ModelError> {
    synthesize_lane(scene, dict, seed, 0, None)
}

/// Draws `L` snapshots `y = sum_k a_k x_k + n` from `dict`.
///
/// Sources are snapped to the nearest grid angle. Noise is circular complex
/// Gaussian with the variance from [`SceneSpec::noise_variance`].
pub fn synthesize_snapshots(
    scene: &SceneSpec,
    dict: &Dictionary,
    seed: u64,
) -> Result<SnapshotSet, ModelError> {
    Ok(synthesize_lane(scene, dict, seed, 0, None)?.snapshots)
}

/// One snapshot set per frequency; amplitudes are drawn independently per
/// frequency at the same source powers. Frequency 0 reproduces
/// [`synthesize_snapshots`] exactly.
pub fn synthesize_multi(
    scene: &SceneSpec,
    dicts: &[Dictionary],
    seed: u64,
    mismatch: Option<&Mismatch>,
) -> Result<Vec<SnapshotSet>, ModelError> {
    if dicts.len() != scene.frequencies.len() {
        return Err(ModelError::FrequencyMismatch {
            expected: scene.frequencies.len(),
            actual: dicts.len(),
        });
    }
    if let Some(mm) = mismatch {
        if !(mm.delta0.is_finite() && mm.delta0 >= 0.0) {
            return Err(invalid("delta0", "must be finite and >= 0"));
        }
    }
    dicts
        .iter()
        .enumerate()
        .map(|(f, dict)| Ok(synthesize_lane(scene, dict, seed, f as u64, mismatch)?.snapshots))
        .collect()
}
