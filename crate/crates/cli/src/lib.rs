//! Command implementations behind the `sbl-doa` binary.
//!
//! Every command reads one JSON config, applies `--set` overrides, computes
//! everything in memory and then writes its outputs with write-then-rename.
//! Exit codes: 0 success, 1 I/O error, 2 config error, 3 numerical failure.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use sbl_doa::baselines::{default_diagonal_load, BaselineError, DEFAULT_EXHAUSTIVE_BUDGET};
use sbl_doa::experiments::{ExperimentConfig, MethodKind, MethodSpec, MetricsTable};
use sbl_doa::formats::{
    self, apply_override, parse_snapshot_file, FormatError, Override, Provenance, SnapshotBlock,
    SnapshotFile,
};
use sbl_doa::model::{synthesize_multi, ArraySpec, Mismatch, SceneSpec};
use sbl_doa::solver::{run_sbl, run_sbl_cc, run_sbl_mc, SblProblem, SolverError};
use sbl_doa::{cbf_spectrum, exhaustive_search, music_spectrum, mvdr_spectrum};

pub const TOOL: &str = "sbl-doa";
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("config error: {0}")]
    Config(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Io { .. } => 1,
            CliError::Config(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }

    fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

fn config_error(path: Option<&Path>, e: impl std::fmt::Display) -> CliError {
    match path {
        Some(p) => CliError::Config(format!("{}: {e}", p.display())),
        None => CliError::Config(e.to_string()),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Simulate,
    Solve,
    Sweep,
    Gram,
}

/// Everything a command needs besides the files it reads.
#[derive(Debug, Clone)]
pub struct RunManifest {
    pub command: Command,
    pub config_path: Option<PathBuf>,
    /// Snapshot file consumed by `solve`.
    pub input_path: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub seed: Option<u64>,
    pub runs: Option<usize>,
    pub overrides: Vec<Override>,
}

/// Paths of the files a command wrote.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Written {
    pub files: Vec<PathBuf>,
}

pub fn run(manifest: &RunManifest) -> Result<Written, CliError> {
    match manifest.command {
        Command::Simulate => cmd_simulate(manifest),
        Command::Solve => cmd_solve(manifest),
        Command::Sweep => cmd_sweep(manifest),
        Command::Gram => cmd_gram(manifest),
    }
}

fn read(path: &Path) -> Result<Vec<u8>, CliError> {
    fs::read(path).map_err(|e| CliError::io(path, e))
}

/// Loads the config (or `default` without `--config`) and applies overrides.
fn load_config(manifest: &RunManifest, default: Value) -> Result<Value, CliError> {
    let path = manifest.config_path.as_deref();
    let mut doc = match path {
        Some(p) => {
            let bytes = read(p)?;
            let text = std::str::from_utf8(&bytes)
                .map_err(|e| config_error(path, format!("not UTF-8: {e}")))?;
            serde_json::from_str(text).map_err(|e| config_error(path, FormatError::from(e)))?
        }
        None => default,
    };
    for ov in &manifest.overrides {
        apply_override(&mut doc, ov).map_err(|e| config_error(path, e))?;
    }
    Ok(doc)
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn provenance(seed: u64, hashed: &[u8]) -> Provenance {
    Provenance {
        tool: TOOL.to_string(),
        version: VERSION.to_string(),
        seed,
        config_sha256: sha256_hex(hashed),
    }
}

/// Collects outputs and writes them only once the command has succeeded.
struct Outputs {
    dir: PathBuf,
    files: Vec<(String, Vec<u8>)>,
}

impl Outputs {
    fn new(dir: &Path) -> Self {
        Self {
            dir: dir.to_path_buf(),
            files: Vec::new(),
        }
    }

    fn add(&mut self, name: impl Into<String>, bytes: impl Into<Vec<u8>>) {
        self.files.push((name.into(), bytes.into()));
    }

    fn add_json(&mut self, name: &str, value: &impl Serialize) -> Result<(), CliError> {
        let mut bytes = serde_json::to_vec_pretty(value)
            .map_err(|e| CliError::Numerical(format!("cannot serialize {name}: {e}")))?;
        bytes.push(b'\n');
        self.add(name, bytes);
        Ok(())
    }

    fn commit(self) -> Result<Written, CliError> {
        fs::create_dir_all(&self.dir).map_err(|e| CliError::io(&self.dir, e))?;
        let mut files = Vec::new();
        for (name, bytes) in self.files {
            let path = self.dir.join(&name);
            write_atomic(&path, &bytes)?;
            files.push(path);
        }
        Ok(Written { files })
    }
}

/// Writes to a temporary file in the target directory, then renames it into
/// place so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let dir = path.parent().unwrap_or(Path::new("."));
    let mut builder = tempfile::Builder::new();
    builder.prefix(".sbl-doa-");
    #[cfg(unix)]
    {
        use std::os::unix::fs::PermissionsExt;
        builder.permissions(fs::Permissions::from_mode(0o644));
    }
    let mut tmp = builder
        .tempfile_in(dir)
        .map_err(|e| CliError::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| CliError::io(tmp.path(), e))?;
    tmp.as_file().sync_all().map_err(|e| CliError::io(tmp.path(), e))?;
    tmp.persist(path).map_err(|e| CliError::io(path, e.error))?;
    Ok(())
}

/// Scene, array and mismatch read from a simulate config: either a bare scene
/// or an object holding `scene` (and optionally `array`, `mismatch`, `seed`).
/// A full experiment config is accepted too.
struct SimulationSetup {
    scene: SceneSpec,
    array: ArraySpec,
    mismatch: Mismatch,
    seed: Option<u64>,
}

#[derive(serde::Deserialize)]
#[serde(deny_unknown_fields)]
struct SimulateDoc {
    scene: SceneSpec,
    #[serde(default)]
    array: ArraySpec,
    #[serde(default)]
    mismatch: Mismatch,
    #[serde(default)]
    seed: Option<u64>,
}

fn parse_simulation(doc: Value, path: Option<&Path>) -> Result<SimulationSetup, CliError> {
    let err = |e: FormatError| config_error(path, e);
    let setup = if doc.get("methods").is_some() {
        let config = formats::parse_experiment_value(doc).map_err(err)?;
        SimulationSetup {
            scene: config.scene,
            array: config.array,
            mismatch: config.mismatch,
            seed: Some(config.seed),
        }
    } else if doc.get("scene").is_some() {
        let d: SimulateDoc = serde_json::from_value(doc).map_err(|e| err(e.into()))?;
        SimulationSetup {
            scene: d.scene,
            array: d.array,
            mismatch: d.mismatch,
            seed: d.seed,
        }
    } else {
        let scene: SceneSpec = serde_json::from_value(doc).map_err(|e| err(e.into()))?;
        SimulationSetup {
            scene,
            array: ArraySpec::default(),
            mismatch: Mismatch::default(),
            seed: None,
        }
    };
    setup.scene.validate().map_err(|e| err(e.into()))?;
    setup.array.dictionary(1.0).map_err(|e| err(e.into()))?;
    if !(setup.mismatch.delta0.is_finite() && setup.mismatch.delta0 >= 0.0) {
        return Err(config_error(path, "invalid value for `mismatch.delta0`: must be finite and >= 0"));
    }
    Ok(setup)
}

/// Synthesizes snapshots for a scene and writes `snapshots.json`.
pub fn cmd_simulate(manifest: &RunManifest) -> Result<Written, CliError> {
    let path = manifest.config_path.as_deref();
    if path.is_none() {
        return Err(CliError::Config("simulate needs --config".into()));
    }
    let doc = load_config(manifest, Value::Null)?;
    let setup = parse_simulation(doc, path)?;
    let seed = manifest.seed.or(setup.seed).unwrap_or(0);
    let dicts = setup
        .array
        .dictionaries(&setup.scene.frequencies)
        .map_err(|e| config_error(path, e))?;
    let mismatch = (setup.mismatch.delta0 > 0.0).then_some(setup.mismatch);
    let sets = synthesize_multi(&setup.scene, &dicts, seed, mismatch.as_ref())
        .map_err(|e| config_error(path, e))?;
    let resolved = json!({
        "scene": setup.scene,
        "array": setup.array,
        "mismatch": setup.mismatch,
        "seed": seed,
    });
    let hashed = serde_json::to_vec(&resolved).expect("resolved config serializes");
    let file = SnapshotFile {
        provenance: Some(provenance(seed, &hashed)),
        scene: Some(setup.scene.clone()),
        array: Some(setup.array),
        snapshots: setup
            .scene
            .frequencies
            .iter()
            .zip(&dicts)
            .zip(&sets)
            .map(|((&f, d), s)| SnapshotBlock::from_set(f, d.spacing_wavelengths(), s))
            .collect(),
    };
    let mut out = Outputs::new(&manifest.output_dir);
    out.add_json("snapshots.json", &file)?;
    out.commit()
}

#[derive(Debug, Serialize)]
struct SolveReport {
    provenance: Provenance,
    method: MethodSpec,
    k_sources: usize,
    support: Vec<usize>,
    support_angles_deg: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    sigma2: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    iterations: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    converged: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    final_log_evidence: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    residual: Option<f64>,
}

fn solver_failure(e: SolverError) -> CliError {
    if e.is_numerical() {
        CliError::Numerical(e.to_string())
    } else {
        CliError::Config(e.to_string())
    }
}

fn baseline_failure(e: BaselineError) -> CliError {
    match e {
        BaselineError::Singular => CliError::Numerical(e.to_string()),
        other => CliError::Config(other.to_string()),
    }
}

/// Runs one method on a snapshot file. Writes `spectrum.csv` (and, for
/// SBL-MC, `spectrum_f<i>.csv` per dictionary) plus `result.json`.
pub fn cmd_solve(manifest: &RunManifest) -> Result<Written, CliError> {
    let input = manifest
        .input_path
        .as_deref()
        .ok_or_else(|| CliError::Config("solve needs --input SNAPSHOTS.json".into()))?;
    let bytes = read(input)?;
    let text = std::str::from_utf8(&bytes)
        .map_err(|e| config_error(Some(input), format!("not UTF-8: {e}")))?;
    let file = parse_snapshot_file(text).map_err(|e| config_error(Some(input), e))?;

    let path = manifest.config_path.as_deref();
    let mut doc = load_config(manifest, json!({ "method": "sbl" }))?;
    let k_value = doc.as_object_mut().and_then(|m| m.remove("k_sources"));
    let method: MethodSpec = serde_json::from_value(doc).map_err(|e| {
        let msg = e.to_string();
        if msg.contains("unknown variant") {
            config_error(path, format!("unknown method; valid methods: {}", MethodKind::valid_names()))
        } else {
            config_error(path, FormatError::from(e))
        }
    })?;
    let k = match k_value {
        Some(v) => serde_json::from_value::<usize>(v)
            .map_err(|e| config_error(path, format!("invalid value for `k_sources`: {e}")))?,
        None => file
            .scene
            .as_ref()
            .map(|s| s.sources.len())
            .ok_or_else(|| config_error(path, "`k_sources` is required when the snapshot file has no scene"))?,
    };

    let dicts = file.dictionaries().map_err(|e| config_error(Some(input), e))?;
    let data = file.snapshot_sets().map_err(|e| config_error(Some(input), e))?;
    let grid = dicts[0].len();
    method
        .validate(dicts[0].sensors(), dicts.len(), k, grid)
        .map_err(|e| config_error(path, e))?;
    let f = method.frequency.unwrap_or(0);
    let angles = dicts[0].angles().to_vec();

    let seed = manifest
        .seed
        .or(file.provenance.as_ref().map(|p| p.seed))
        .unwrap_or(0);
    let prov = provenance(seed, &bytes);
    let comment = prov.csv_comment();
    let mut out = Outputs::new(&manifest.output_dir);
    let mut report = SolveReport {
        provenance: prov,
        method: method.clone(),
        k_sources: k,
        support: Vec::new(),
        support_angles_deg: Vec::new(),
        sigma2: None,
        iterations: None,
        converged: None,
        final_log_evidence: None,
        residual: None,
    };

    let unc = method.uncertainty();
    let options = method.solver_options(k);
    match method.method {
        MethodKind::Sbl | MethodKind::SblA | MethodKind::SblX | MethodKind::SblCc | MethodKind::SblMc => {
            let result = if method.method.is_multi_dictionary() {
                let problem = SblProblem::new(
                    dicts.iter().collect(),
                    data.iter().collect(),
                    vec![unc; dicts.len()],
                )
                .map_err(solver_failure)?;
                if method.method == MethodKind::SblMc {
                    run_sbl_mc(&problem, &options)
                } else {
                    run_sbl_cc(&problem, &options)
                }
            } else {
                let problem = SblProblem::single(&dicts[f], &data[f], unc).map_err(solver_failure)?;
                run_sbl(&problem, &options)
            }
            .map_err(solver_failure)?;
            out.add("spectrum.csv", formats::write_spectrum_csv(&comment, &angles, &result.gamma));
            if method.method == MethodKind::SblMc {
                for (i, r) in result.per_dictionary.iter().enumerate() {
                    out.add(
                        format!("spectrum_f{i}.csv"),
                        formats::write_spectrum_csv(&comment, &angles, &r.gamma),
                    );
                }
            }
            report.support = result.support;
            report.sigma2 = Some(result.sigma2);
            report.iterations = Some(result.iterations);
            report.converged = Some(result.converged);
            report.final_log_evidence = result.evidence_trace.last().copied();
        }
        MethodKind::Cbf | MethodKind::Mvdr | MethodKind::Music => {
            let s = data[f].sample_covariance();
            let spectrum = match method.method {
                MethodKind::Cbf => cbf_spectrum(s, &dicts[f]),
                MethodKind::Mvdr => {
                    let load = method.diagonal_load.unwrap_or_else(|| default_diagonal_load(s));
                    if !load.is_finite() {
                        return Err(CliError::Numerical(format!(
                            "diagonal load {load} derived from the data is not finite"
                        )));
                    }
                    mvdr_spectrum(s, &dicts[f], load)
                }
                _ => music_spectrum(s, &dicts[f], k),
            }
            .map_err(baseline_failure)?;
            out.add("spectrum.csv", formats::write_spectrum_csv(&comment, &angles, &spectrum.values));
            report.support = spectrum.peaks(k);
        }
        MethodKind::Exhaustive => {
            let budget = method.budget.unwrap_or(DEFAULT_EXHAUSTIVE_BUDGET);
            let outcome =
                exhaustive_search(data[f].data(), &dicts[f], k, Some(budget)).map_err(baseline_failure)?;
            report.support = outcome.support;
            report.residual = Some(outcome.residual);
        }
    }
    report.support_angles_deg = report.support.iter().map(|&i| angles[i]).collect();
    out.add_json("result.json", &report)?;
    out.commit()
}

#[derive(Debug, Serialize)]
struct SweepReport<'a> {
    provenance: Provenance,
    config: &'a ExperimentConfig,
    metrics: &'a MetricsTable,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |v| format!("{v:.3}"))
}

/// One stdout line per sweep value.
pub fn summary_lines(table: &MetricsTable) -> Vec<String> {
    let mut points: Vec<Option<f64>> = Vec::new();
    for r in &table.rows {
        if !points.contains(&r.sweep_value) {
            points.push(r.sweep_value);
        }
    }
    points
        .into_iter()
        .map(|p| {
            let head = match (table.sweep_parameter, p) {
                (Some(param), Some(v)) => format!("{}={v}", param.name()),
                _ => "all".to_string(),
            };
            let cells: Vec<String> = table
                .rows
                .iter()
                .filter(|r| r.sweep_value == p)
                .map(|r| {
                    format!(
                        "{} rmse={} band={} failures={}/{}",
                        r.method,
                        fmt_opt(r.rmse_weakest_deg),
                        fmt_opt(r.second_peak_band_width_deg),
                        r.failures,
                        r.runs
                    )
                })
                .collect();
            format!("{head}: {}", cells.join("; "))
        })
        .collect()
}

/// Runs a Monte Carlo experiment. Writes `metrics.json`, `metrics.csv` and
/// `histogram.csv`; returns the table for the summary.
pub fn cmd_sweep_table(manifest: &RunManifest) -> Result<(Written, MetricsTable), CliError> {
    let path = manifest.config_path.as_deref();
    if path.is_none() {
        return Err(CliError::Config("sweep needs --config".into()));
    }
    let mut doc = load_config(manifest, Value::Null)?;
    if let Some(obj) = doc.as_object_mut() {
        if let Some(seed) = manifest.seed {
            obj.insert("seed".into(), json!(seed));
        }
        if let Some(runs) = manifest.runs {
            obj.insert("runs".into(), json!(runs));
        }
    }
    let config = formats::parse_experiment_value(doc).map_err(|e| config_error(path, e))?;
    let table = sbl_doa::run_experiment(&config).map_err(|e| config_error(path, e))?;
    if table.rows.iter().all(|r| r.failures == r.runs) {
        let example = table
            .rows
            .iter()
            .flat_map(|r| r.failure_examples.first())
            .next()
            .cloned()
            .unwrap_or_default();
        return Err(CliError::Numerical(format!("every run failed; first error: {example}")));
    }
    let hashed = serde_json::to_vec(&config).expect("config serializes");
    let prov = provenance(config.seed, &hashed);
    let comment = prov.csv_comment();
    let mut out = Outputs::new(&manifest.output_dir);
    out.add_json(
        "metrics.json",
        &SweepReport {
            provenance: prov,
            config: &config,
            metrics: &table,
        },
    )?;
    out.add("metrics.csv", formats::write_metrics_csv(&comment, &table));
    out.add("histogram.csv", formats::write_histogram_csv(&comment, &table));
    Ok((out.commit()?, table))
}

pub fn cmd_sweep(manifest: &RunManifest) -> Result<Written, CliError> {
    let (written, table) = cmd_sweep_table(manifest)?;
    for line in summary_lines(&table) {
        println!("{line}");
    }
    Ok(written)
}

/// Writes the dictionary and the magnitude of its Gram matrix for every
/// frequency. The config is an array document, or an object with `array` and
/// optionally `scene` (whose frequencies are then used).
pub fn cmd_gram(manifest: &RunManifest) -> Result<Written, CliError> {
    let path = manifest.config_path.as_deref();
    let doc = load_config(manifest, json!({}))?;
    let err = |e: FormatError| config_error(path, e);
    let (array, frequencies) = if doc.get("array").is_some() || doc.get("scene").is_some() {
        let array: ArraySpec = match doc.get("array") {
            Some(a) => serde_json::from_value(a.clone()).map_err(|e| err(e.into()))?,
            None => ArraySpec::default(),
        };
        let frequencies = match doc.get("scene") {
            Some(s) => {
                let scene: SceneSpec = serde_json::from_value(s.clone()).map_err(|e| err(e.into()))?;
                scene.validate().map_err(|e| err(e.into()))?;
                scene.frequencies
            }
            None => vec![1.0],
        };
        (array, frequencies)
    } else {
        let array: ArraySpec = serde_json::from_value(doc).map_err(|e| err(e.into()))?;
        (array, vec![1.0])
    };
    let dicts = array.dictionaries(&frequencies).map_err(|e| err(e.into()))?;
    let hashed = serde_json::to_vec(&json!({ "array": array, "frequencies": frequencies }))
        .expect("array serializes");
    let comment = provenance(manifest.seed.unwrap_or(0), &hashed).csv_comment();
    let mut out = Outputs::new(&manifest.output_dir);
    for (i, d) in dicts.iter().enumerate() {
        out.add(format!("dictionary_f{i}.csv"), formats::write_dictionary_csv(&comment, d));
        out.add(format!("gram_f{i}.csv"), formats::write_gram_csv(&comment, d));
    }
    out.commit()
}
