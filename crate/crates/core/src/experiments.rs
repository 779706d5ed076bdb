//! Monte-Carlo harness.
//!
//! Every run draws fresh snapshots from a seed derived from the experiment seed
//! and the run index, hands the same data to every method and every sweep
//! value (common random numbers), extracts the top-`K` peaks of each method's
//! spectrum and accumulates the metrics in run order.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::baselines::{
    cbf_spectrum, default_diagonal_load, exhaustive_search, music_spectrum, mvdr_spectrum,
    binomial, DEFAULT_EXHAUSTIVE_BUDGET,
};
use crate::model::{
    snap_sources, synthesize_multi, ArraySpec, Dictionary, Mismatch, ModelError, SceneSpec,
    SnapshotSet, UncertaintyModel,
};
use crate::rng::run_seed;
use crate::solver::{run_sbl, run_sbl_cc, run_sbl_mc, SblProblem, SolverError, SolverOptions};
use crate::CMatrix;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExperimentError {
    #[error("invalid value for `{field}`: {reason}")]
    Invalid { field: String, reason: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("method `{method}`: {source}")]
    Method {
        method: String,
        #[source]
        source: SolverError,
    },
}

fn invalid(field: impl Into<String>, reason: impl Into<String>) -> ExperimentError {
    ExperimentError::Invalid {
        field: field.into(),
        reason: reason.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MethodKind {
    #[serde(rename = "sbl")]
    Sbl,
    #[serde(rename = "sbl-a")]
    SblA,
    #[serde(rename = "sbl-x")]
    SblX,
    #[serde(rename = "sbl-mc")]
    SblMc,
    #[serde(rename = "sbl-cc")]
    SblCc,
    #[serde(rename = "cbf")]
    Cbf,
    #[serde(rename = "mvdr")]
    Mvdr,
    #[serde(rename = "music")]
    Music,
    #[serde(rename = "exhaustive")]
    Exhaustive,
}

impl MethodKind {
    pub const ALL: [MethodKind; 9] = [
        MethodKind::Sbl,
        MethodKind::SblA,
        MethodKind::SblX,
        MethodKind::SblMc,
        MethodKind::SblCc,
        MethodKind::Cbf,
        MethodKind::Mvdr,
        MethodKind::Music,
        MethodKind::Exhaustive,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MethodKind::Sbl => "sbl",
            MethodKind::SblA => "sbl-a",
            MethodKind::SblX => "sbl-x",
            MethodKind::SblMc => "sbl-mc",
            MethodKind::SblCc => "sbl-cc",
            MethodKind::Cbf => "cbf",
            MethodKind::Mvdr => "mvdr",
            MethodKind::Music => "music",
            MethodKind::Exhaustive => "exhaustive",
        }
    }

    pub fn is_sbl(self) -> bool {
        matches!(
            self,
            MethodKind::Sbl
                | MethodKind::SblA
                | MethodKind::SblX
                | MethodKind::SblMc
                | MethodKind::SblCc
        )
    }

    /// Methods that combine every frequency.
    pub fn is_multi_dictionary(self) -> bool {
        matches!(self, MethodKind::SblMc | MethodKind::SblCc)
    }

    pub fn valid_names() -> String {
        Self::ALL.map(|m| m.name()).join(", ")
    }
}

impl fmt::Display for MethodKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MethodKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| format!("unknown method `{s}` (valid: {})", Self::valid_names()))
    }
}

/// One method and its parameters. Unset SBL parameters fall back to the
/// solver defaults; SBL-A defaults to `phi_e = 0.03` and SBL-x to
/// `gamma_e = 0.75`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodSpec {
    pub method: MethodKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phi_e: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma_e: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exponent_b: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_iterations: Option<usize>,
    /// MVDR diagonal load; default `1e-6 Tr(S) / N`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diagonal_load: Option<f64>,
    /// Frequency index used by single-dictionary methods (default 0).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frequency: Option<usize>,
    /// Exhaustive search budget (default 1e7 supports).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub budget: Option<u64>,
}

impl MethodSpec {
    pub fn new(method: MethodKind) -> Self {
        Self {
            method,
            label: None,
            phi_e: None,
            gamma_e: None,
            exponent_b: None,
            epsilon: None,
            max_iterations: None,
            diagonal_load: None,
            frequency: None,
            budget: None,
        }
    }

    pub fn with_label(mut self, label: &str) -> Self {
        self.label = Some(label.to_string());
        self
    }

    pub fn with_uncertainty(mut self, phi_e: f64, gamma_e: f64) -> Self {
        self.phi_e = Some(phi_e);
        self.gamma_e = Some(gamma_e);
        self
    }

    pub fn label(&self) -> String {
        self.label
            .clone()
            .unwrap_or_else(|| self.method.name().to_string())
    }

    pub fn uncertainty(&self) -> UncertaintyModel {
        let (phi, gamma) = match self.method {
            MethodKind::SblA => (0.03, 0.0),
            MethodKind::SblX => (0.0, 0.75),
            _ => (0.0, 0.0),
        };
        UncertaintyModel {
            phi_e: self.phi_e.unwrap_or(phi),
            gamma_e: self.gamma_e.unwrap_or(gamma),
        }
    }

    pub fn solver_options(&self, k_sources: usize) -> SolverOptions {
        let defaults = SolverOptions::with_k(k_sources);
        SolverOptions {
            epsilon: self.epsilon.unwrap_or(defaults.epsilon),
            max_iterations: self.max_iterations.unwrap_or(defaults.max_iterations),
            exponent_b: self.exponent_b.unwrap_or(defaults.exponent_b),
            ..defaults
        }
    }

    /// Checks the method against the problem dimensions.
    pub fn validate(&self, sensors: usize, frequencies: usize, k: usize, grid: usize) -> Result<(), ExperimentError> {
        let label = self.label();
        let field = |name: &str| format!("methods[{label}].{name}");
        if self.method.is_sbl() {
            self.uncertainty()
                .validate()
                .map_err(|e| invalid(field("uncertainty"), e.to_string()))?;
            self.solver_options(k)
                .validate(sensors)
                .map_err(|e| ExperimentError::Method {
                    method: label.clone(),
                    source: e,
                })?;
        }
        if let Some(f) = self.frequency {
            if f >= frequencies {
                return Err(invalid(
                    field("frequency"),
                    format!("index {f} but only {frequencies} frequencies"),
                ));
            }
        }
        if let Some(load) = self.diagonal_load {
            if !(load >= 0.0 && load.is_finite()) {
                return Err(invalid(field("diagonal_load"), "must be finite and >= 0"));
            }
        }
        match self.method {
            MethodKind::Music if k < 1 || k >= sensors => Err(invalid(
                field("method"),
                format!("MUSIC needs 1 <= K < N, got K = {k}, N = {sensors}"),
            )),
            MethodKind::Exhaustive => {
                let budget = self.budget.unwrap_or(DEFAULT_EXHAUSTIVE_BUDGET);
                if binomial(grid, k) > budget as u128 {
                    Err(invalid(
                        field("budget"),
                        format!("C({grid}, {k}) supports exceed the budget of {budget}"),
                    ))
                } else {
                    Ok(())
                }
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParameter {
    SnrDb,
    PhiE,
    GammaE,
    Delta0,
}

impl SweepParameter {
    pub fn name(self) -> &'static str {
        match self {
            SweepParameter::SnrDb => "snr_db",
            SweepParameter::PhiE => "phi_e",
            SweepParameter::GammaE => "gamma_e",
            SweepParameter::Delta0 => "delta0",
        }
    }
}

/// A parameter stepped through a list of values. `phi_e` and `gamma_e`
/// override every SBL-family method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sweep {
    pub parameter: SweepParameter,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsSettings {
    /// Half width, in grid bins, of the windows around true and aliased
    /// locations.
    pub alias_window_bins: usize,
    /// A second peak within this distance of the weakest source is a hit.
    pub hit_tolerance_deg: f64,
    pub percentile_lo: f64,
    pub percentile_hi: f64,
}

impl Default for MetricsSettings {
    fn default() -> Self {
        Self {
            alias_window_bins: 1,
            hit_tolerance_deg: 2.0,
            percentile_lo: 1.0,
            percentile_hi: 99.0,
        }
    }
}

fn default_runs() -> usize {
    500
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scene: SceneSpec,
    #[serde(default)]
    pub array: ArraySpec,
    pub methods: Vec<MethodSpec>,
    #[serde(default = "default_runs")]
    pub runs: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<Sweep>,
    #[serde(default)]
    pub mismatch: Mismatch,
    #[serde(default)]
    pub metrics: MetricsSettings,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), ExperimentError> {
        self.scene.validate()?;
        let dicts = self.array.dictionaries(&self.scene.frequencies)?;
        snap_sources(&self.scene, &dicts[0])?;
        if self.runs < 1 {
            return Err(invalid("runs", "must be >= 1"));
        }
        if self.methods.is_empty() {
            return Err(invalid("methods", "at least one method is required"));
        }
        let mut labels: Vec<String> = self.methods.iter().map(|m| m.label()).collect();
        labels.sort();
        if let Some(w) = labels.windows(2).find(|w| w[0] == w[1]) {
            return Err(invalid(
                "methods",
                format!("duplicate label `{}` (set `label` to tell them apart)", w[0]),
            ));
        }
        let k = self.scene.sources.len();
        let n = self.array.sensors;
        for method in &self.methods {
            method.validate(n, self.scene.frequencies.len(), k, dicts[0].len())?;
        }
        if !(self.mismatch.delta0.is_finite() && self.mismatch.delta0 >= 0.0) {
            return Err(invalid("mismatch.delta0", "must be finite and >= 0"));
        }
        let m = &self.metrics;
        if !(0.0..100.0).contains(&m.percentile_lo)
            || !(m.percentile_hi > m.percentile_lo && m.percentile_hi <= 100.0)
        {
            return Err(invalid(
                "metrics.percentile_lo",
                "need 0 <= lo < hi <= 100",
            ));
        }
        if !(m.hit_tolerance_deg >= 0.0 && m.hit_tolerance_deg.is_finite()) {
            return Err(invalid("metrics.hit_tolerance_deg", "must be finite and >= 0"));
        }
        if let Some(sweep) = &self.sweep {
            if sweep.values.is_empty() {
                return Err(invalid("sweep.values", "at least one value is required"));
            }
            for &v in &sweep.values {
                let ok = match sweep.parameter {
                    SweepParameter::SnrDb => v.is_finite(),
                    _ => v.is_finite() && v >= 0.0,
                };
                if !ok {
                    return Err(invalid(
                        "sweep.values",
                        format!("{v} is not a valid {}", sweep.parameter.name()),
                    ));
                }
            }
        }
        Ok(())
    }

    fn points(&self) -> Vec<Option<f64>> {
        match &self.sweep {
            Some(s) => s.values.iter().map(|v| Some(*v)).collect(),
            None => vec![None],
        }
    }
}

/// Metrics of one method at one sweep value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub method: String,
    pub kind: MethodKind,
    pub sweep_value: Option<f64>,
    pub runs: usize,
    /// Runs where the method errored or found no peak at all.
    pub failures: usize,
    /// Runs with at least one but fewer than `K` peaks; their weakest found
    /// peak still enters the RMSE.
    pub short_peak_runs: usize,
    pub rmse_weakest_deg: Option<f64>,
    /// Nearest-rank percentiles of the second strongest peak angle.
    pub second_peak_band_deg: Option<(f64, f64)>,
    pub second_peak_band_width_deg: Option<f64>,
    /// Fraction of all runs whose second peak lies within the hit tolerance of
    /// the weakest source.
    pub second_peak_hit_fraction: f64,
    /// Counts of top-`K` peaks per grid angle.
    pub histogram: Vec<u64>,
    pub true_mass: u64,
    pub aliased_mass: u64,
    pub aliased_mass_fraction: Option<f64>,
    pub mean_iterations: Option<f64>,
    pub unconverged_runs: usize,
    /// First few failure messages.
    pub failure_examples: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsTable {
    pub sweep_parameter: Option<SweepParameter>,
    pub angles_deg: Vec<f64>,
    pub weakest_source_deg: f64,
    /// Grid bins counted as true-source mass.
    pub true_bins: Vec<usize>,
    /// Grid bins counted as aliased mass.
    pub alias_bins: Vec<usize>,
    pub rows: Vec<MetricsRow>,
}

impl MetricsTable {
    pub fn row(&self, method: &str, sweep_value: Option<f64>) -> Option<&MetricsRow> {
        self.rows
            .iter()
            .find(|r| r.method == method && r.sweep_value == sweep_value)
    }
}

/// `sqrt(mean((estimate - truth)^2))`, `None` without estimates.
pub fn rmse_weakest(estimates_deg: &[f64], truth_deg: f64) -> Option<f64> {
    if estimates_deg.is_empty() {
        return None;
    }
    let mse = estimates_deg
        .iter()
        .map(|e| (e - truth_deg).powi(2))
        .sum::<f64>()
        / estimates_deg.len() as f64;
    Some(mse.sqrt())
}

/// Nearest-rank percentiles `(p_lo, p_hi)`: the `ceil(p n / 100)`-th smallest
/// sample (rank at least 1).
pub fn percentile_band(samples: &[f64], lo: f64, hi: f64) -> Result<(f64, f64), ExperimentError> {
    if samples.is_empty() {
        return Err(invalid("samples", "at least one sample is required"));
    }
    if !(0.0 <= lo && lo < hi && hi <= 100.0) {
        return Err(invalid("percentiles", "need 0 <= lo < hi <= 100"));
    }
    if samples.iter().any(|s| s.is_nan()) {
        return Err(invalid("samples", "NaN sample"));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let rank = |p: f64| -> f64 {
        let r = ((p / 100.0) * n as f64).ceil() as usize;
        sorted[r.clamp(1, n) - 1]
    };
    Ok((rank(lo), rank(hi)))
}

/// Grid bins of the grating lobes of every source at every frequency:
/// angles with `sin(theta_a) = sin(theta) + q / d_f` for nonzero integers `q`
/// inside the visible region, `d_f` being the spacing in wavelengths at
/// frequency `f`. Bins within `window` of a true source are left out.
pub fn alias_bins(
    dict_angles: &[f64],
    source_bins: &[usize],
    spacings_wavelengths: &[f64],
    window: usize,
) -> (Vec<usize>, Vec<usize>) {
    let m = dict_angles.len();
    let nearest = |angle: f64| -> usize {
        let p = dict_angles.partition_point(|&a| a < angle);
        if p == 0 {
            0
        } else if p == m {
            m - 1
        } else if (dict_angles[p] - angle).abs() < (angle - dict_angles[p - 1]).abs() {
            p
        } else {
            p - 1
        }
    };
    let widen = |centre: usize, out: &mut Vec<usize>| {
        let lo = centre.saturating_sub(window);
        let hi = (centre + window).min(m - 1);
        out.extend(lo..=hi);
    };
    let mut truth = Vec::new();
    for &b in source_bins {
        widen(b, &mut truth);
    }
    truth.sort_unstable();
    truth.dedup();

    let mut aliases = Vec::new();
    for &d in spacings_wavelengths {
        for &b in source_bins {
            let s = dict_angles[b].to_radians().sin();
            for direction in [1.0, -1.0] {
                let mut q = 1.0;
                loop {
                    let sa = s + direction * q / d;
                    if sa.abs() > 1.0 {
                        break;
                    }
                    widen(nearest(sa.asin().to_degrees()), &mut aliases);
                    q += 1.0;
                }
            }
        }
    }
    aliases.sort_unstable();
    aliases.dedup();
    aliases.retain(|b| truth.binary_search(b).is_err());
    (truth, aliases)
}

/// What one method produced on one run.
#[derive(Debug, Clone)]
struct Outcome {
    /// Peak bins, strongest first.
    peaks: Vec<usize>,
    iterations: Option<(usize, bool)>,
    error: Option<String>,
}

impl Outcome {
    fn failed(message: String) -> Self {
        Self {
            peaks: Vec::new(),
            iterations: None,
            error: Some(message),
        }
    }
}

/// A method with every sweep override resolved.
#[derive(Debug, Clone)]
struct ResolvedMethod {
    spec: MethodSpec,
    uncertainty: UncertaintyModel,
    options: SolverOptions,
}

fn resolve_methods(config: &ExperimentConfig, point: Option<f64>) -> Vec<ResolvedMethod> {
    let k = config.scene.sources.len();
    config
        .methods
        .iter()
        .map(|spec| {
            let mut uncertainty = spec.uncertainty();
            if let (Some(sweep), Some(v)) = (&config.sweep, point) {
                if spec.method.is_sbl() {
                    match sweep.parameter {
                        SweepParameter::PhiE => uncertainty.phi_e = v,
                        SweepParameter::GammaE => uncertainty.gamma_e = v,
                        _ => {}
                    }
                }
            }
            ResolvedMethod {
                spec: spec.clone(),
                uncertainty,
                options: spec.solver_options(k),
            }
        })
        .collect()
}

fn evaluate(
    method: &ResolvedMethod,
    dicts: &[Dictionary],
    data: &[SnapshotSet],
    k: usize,
) -> Outcome {
    let f = method.spec.frequency.unwrap_or(0);
    let sbl = |result: Result<crate::solver::SblResult, SolverError>| match result {
        Ok(r) => Outcome {
            peaks: r.support,
            iterations: Some((r.iterations, r.converged)),
            error: None,
        },
        Err(e) => Outcome::failed(e.to_string()),
    };
    let spectrum = |result: Result<crate::baselines::Spectrum, crate::baselines::BaselineError>| {
        match result {
            Ok(s) => Outcome {
                peaks: s.peaks(k),
                iterations: None,
                error: None,
            },
            Err(e) => Outcome::failed(e.to_string()),
        }
    };
    match method.spec.method {
        MethodKind::Sbl | MethodKind::SblA | MethodKind::SblX => {
            match SblProblem::single(&dicts[f], &data[f], method.uncertainty) {
                Ok(p) => sbl(run_sbl(&p, &method.options)),
                Err(e) => Outcome::failed(e.to_string()),
            }
        }
        MethodKind::SblMc | MethodKind::SblCc => {
            let problem = SblProblem::new(
                dicts.iter().collect(),
                data.iter().collect(),
                vec![method.uncertainty; dicts.len()],
            );
            match problem {
                Ok(p) if method.spec.method == MethodKind::SblMc => {
                    sbl(run_sbl_mc(&p, &method.options))
                }
                Ok(p) => sbl(run_sbl_cc(&p, &method.options)),
                Err(e) => Outcome::failed(e.to_string()),
            }
        }
        MethodKind::Cbf => spectrum(cbf_spectrum(data[f].sample_covariance(), &dicts[f])),
        MethodKind::Mvdr => {
            let s = data[f].sample_covariance();
            let load = method
                .spec
                .diagonal_load
                .unwrap_or_else(|| default_diagonal_load(s));
            spectrum(mvdr_spectrum(s, &dicts[f], load))
        }
        MethodKind::Music => spectrum(music_spectrum(data[f].sample_covariance(), &dicts[f], k)),
        MethodKind::Exhaustive => {
            let budget = method.spec.budget.unwrap_or(DEFAULT_EXHAUSTIVE_BUDGET);
            match exhaustive_search(data[f].data(), &dicts[f], k, Some(budget)) {
                Ok(out) => Outcome {
                    peaks: order_by_power(&out.support, &dicts[f], data[f].data()),
                    iterations: None,
                    error: None,
                },
                Err(e) => Outcome::failed(e.to_string()),
            }
        }
    }
}

/// Orders a support by least-squares source power, strongest first.
fn order_by_power(support: &[usize], dict: &Dictionary, data: &CMatrix) -> Vec<usize> {
    let a = dict.columns(support);
    let powers: Vec<f64> = match a.pseudo_inverse(1e-12) {
        Ok(pinv) => {
            let x = pinv * data;
            x.row_iter().map(|r| r.norm_squared()).collect()
        }
        Err(_) => vec![0.0; support.len()],
    };
    let mut order: Vec<usize> = (0..support.len()).collect();
    order.sort_by(|&i, &j| powers[j].total_cmp(&powers[i]).then(support[i].cmp(&support[j])));
    order.into_iter().map(|i| support[i]).collect()
}

struct Accumulator {
    estimates: Vec<f64>,
    second_peaks: Vec<f64>,
    hits: usize,
    histogram: Vec<u64>,
    failures: usize,
    short: usize,
    iterations: Vec<usize>,
    unconverged: usize,
    examples: Vec<String>,
}

/// Runs every method on `config.runs` seeded scenes for every sweep value.
///
/// Solver failures are counted per method and never abort the sweep. The
/// result depends only on the config (including its seed).
pub fn run_experiment(config: &ExperimentConfig) -> Result<MetricsTable, ExperimentError> {
    config.validate()?;
    let dicts = config.array.dictionaries(&config.scene.frequencies)?;
    let grid = dicts[0].angles().to_vec();
    let source_bins = snap_sources(&config.scene, &dicts[0])?;
    let weakest_bin = source_bins[config.scene.weakest_source()];
    let truth = grid[weakest_bin];
    let spacings: Vec<f64> = dicts.iter().map(|d| d.spacing_wavelengths()).collect();
    let (true_bins, alias) = alias_bins(
        &grid,
        &source_bins,
        &spacings,
        config.metrics.alias_window_bins,
    );
    let k = config.scene.sources.len();
    let settings = config.metrics;

    let mut rows = Vec::new();
    for point in config.points() {
        let mut scene = config.scene.clone();
        let mut mismatch = config.mismatch;
        if let (Some(sweep), Some(v)) = (&config.sweep, point) {
            match sweep.parameter {
                SweepParameter::SnrDb => scene.snr_db = v,
                SweepParameter::Delta0 => mismatch.delta0 = v,
                _ => {}
            }
        }
        let methods = resolve_methods(config, point);
        let mismatch = (mismatch.delta0 > 0.0).then_some(mismatch);

        let per_run: Vec<Vec<Outcome>> = (0..config.runs)
            .into_par_iter()
            .map(|run| {
                let seed = run_seed(config.seed, run as u64);
                match synthesize_multi(&scene, &dicts, seed, mismatch.as_ref()) {
                    Ok(data) => methods
                        .iter()
                        .map(|m| evaluate(m, &dicts, &data, k))
                        .collect(),
                    Err(e) => methods
                        .iter()
                        .map(|_| Outcome::failed(e.to_string()))
                        .collect(),
                }
            })
            .collect();

        for (index, method) in methods.iter().enumerate() {
            let mut acc = Accumulator {
                estimates: Vec::new(),
                second_peaks: Vec::new(),
                hits: 0,
                histogram: vec![0; grid.len()],
                failures: 0,
                short: 0,
                iterations: Vec::new(),
                unconverged: 0,
                examples: Vec::new(),
            };
            for outcomes in &per_run {
                let o = &outcomes[index];
                if let Some((iters, converged)) = o.iterations {
                    acc.iterations.push(iters);
                    if !converged {
                        acc.unconverged += 1;
                    }
                }
                if o.error.is_some() || o.peaks.is_empty() {
                    acc.failures += 1;
                    if acc.examples.len() < 5 {
                        acc.examples.push(
                            o.error
                                .clone()
                                .unwrap_or_else(|| "no local peak found".to_string()),
                        );
                    }
                    continue;
                }
                if o.peaks.len() < k {
                    acc.short += 1;
                }
                for &p in &o.peaks {
                    acc.histogram[p] += 1;
                }
                acc.estimates.push(grid[*o.peaks.last().expect("nonempty")]);
                if let Some(&second) = o.peaks.get(1) {
                    acc.second_peaks.push(grid[second]);
                    if (grid[second] - truth).abs() <= settings.hit_tolerance_deg {
                        acc.hits += 1;
                    }
                }
            }
            let band = percentile_band(
                &acc.second_peaks,
                settings.percentile_lo,
                settings.percentile_hi,
            )
            .ok();
            let true_mass: u64 = true_bins.iter().map(|&b| acc.histogram[b]).sum();
            let aliased_mass: u64 = alias.iter().map(|&b| acc.histogram[b]).sum();
            rows.push(MetricsRow {
                method: method.spec.label(),
                kind: method.spec.method,
                sweep_value: point,
                runs: config.runs,
                failures: acc.failures,
                short_peak_runs: acc.short,
                rmse_weakest_deg: rmse_weakest(&acc.estimates, truth),
                second_peak_band_deg: band,
                second_peak_band_width_deg: band.map(|(lo, hi)| hi - lo),
                second_peak_hit_fraction: acc.hits as f64 / config.runs as f64,
                true_mass,
                aliased_mass,
                aliased_mass_fraction: (true_mass > 0)
                    .then(|| aliased_mass as f64 / true_mass as f64),
                mean_iterations: (!acc.iterations.is_empty()).then(|| {
                    acc.iterations.iter().sum::<usize>() as f64 / acc.iterations.len() as f64
                }),
                unconverged_runs: acc.unconverged,
                failure_examples: acc.examples,
                histogram: acc.histogram,
            });
        }
    }

    Ok(MetricsTable {
        sweep_parameter: config.sweep.as_ref().map(|s| s.parameter),
        angles_deg: grid,
        weakest_source_deg: truth,
        true_bins,
        alias_bins: alias,
        rows,
    })
}
