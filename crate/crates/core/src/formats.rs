//! On-disk documents: JSON configs and snapshot files, CSV spectra and tables.
//!
//! Complex numbers are always stored as `[re, im]` pairs. CSV values are
//! written in scientific notation with 17 significant digits, which parses back
//! to the identical `f64`. Lines starting with `#` in CSV files are comments
//! (the provenance header).

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::experiments::{ExperimentConfig, ExperimentError, MetricsTable};
use crate::model::{ArraySpec, Dictionary, ModelError, SceneSpec, SnapshotSet};
use crate::{CMatrix, Complex64};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FormatError {
    #[error("line {line}, column {column}: {message}")]
    Json {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("invalid value for `{field}`: {reason}")]
    Invalid { field: String, reason: String },
    #[error("line {line}: {message}")]
    Csv { line: usize, message: String },
    #[error("bad override `{text}`: {reason}")]
    Override { text: String, reason: String },
}

impl FormatError {
    fn invalid(field: impl Into<String>, reason: impl Into<String>) -> Self {
        FormatError::Invalid {
            field: field.into(),
            reason: reason.into(),
        }
    }
}

impl From<serde_json::Error> for FormatError {
    fn from(e: serde_json::Error) -> Self {
        FormatError::Json {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        }
    }
}

impl From<ModelError> for FormatError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::InvalidField { field, reason } => FormatError::Invalid { field, reason },
            other => FormatError::invalid("sources", other.to_string()),
        }
    }
}

impl From<ExperimentError> for FormatError {
    fn from(e: ExperimentError) -> Self {
        match e {
            ExperimentError::Invalid { field, reason } => FormatError::Invalid { field, reason },
            ExperimentError::Model(m) => m.into(),
            other => FormatError::invalid("methods", other.to_string()),
        }
    }
}

/// Reads and validates a scene document.
pub fn parse_scene(text: &str) -> Result<SceneSpec, FormatError> {
    let scene: SceneSpec = serde_json::from_str(text)?;
    scene.validate()?;
    Ok(scene)
}

/// Reads and validates an array document.
pub fn parse_array(text: &str) -> Result<ArraySpec, FormatError> {
    let array: ArraySpec = serde_json::from_str(text)?;
    array.dictionary(1.0)?;
    Ok(array)
}

/// Reads and validates an experiment config.
pub fn parse_experiment_config(text: &str) -> Result<ExperimentConfig, FormatError> {
    parse_experiment_value(serde_json::from_str(text)?)
}

/// Validates an experiment config held as a JSON value (after overrides).
pub fn parse_experiment_value(value: Value) -> Result<ExperimentConfig, FormatError> {
    let config: ExperimentConfig = serde_json::from_value(value)?;
    config.validate()?;
    Ok(config)
}

/// Where an output came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    pub tool: String,
    pub version: String,
    pub seed: u64,
    /// Hex SHA-256 of the input config bytes.
    pub config_sha256: String,
}

impl Provenance {
    /// `#`-prefixed CSV comment lines.
    pub fn csv_comment(&self) -> String {
        format!(
            "# tool: {} {}\n# seed: {}\n# config_sha256: {}\n",
            self.tool, self.version, self.seed, self.config_sha256
        )
    }
}

/// Snapshots of one frequency: `data[n][l] = [re, im]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SnapshotBlock {
    pub relative_frequency: f64,
    pub spacing_wavelengths: f64,
    pub data: Vec<Vec<[f64; 2]>>,
}

impl SnapshotBlock {
    pub fn from_set(relative_frequency: f64, spacing_wavelengths: f64, set: &SnapshotSet) -> Self {
        let y = set.data();
        let data = (0..y.nrows())
            .map(|n| (0..y.ncols()).map(|l| [y[(n, l)].re, y[(n, l)].im]).collect())
            .collect();
        Self {
            relative_frequency,
            spacing_wavelengths,
            data,
        }
    }

    pub fn to_matrix(&self) -> Result<CMatrix, FormatError> {
        let rows = self.data.len();
        let cols = self.data.first().map_or(0, Vec::len);
        if rows == 0 || cols == 0 {
            return Err(FormatError::invalid(
                "snapshots.data",
                "need at least one sensor and one snapshot",
            ));
        }
        if let Some(r) = self.data.iter().position(|row| row.len() != cols) {
            return Err(FormatError::invalid(
                "snapshots.data",
                format!("row {r} has {} columns, expected {cols}", self.data[r].len()),
            ));
        }
        if self.data.iter().flatten().flatten().any(|v| !v.is_finite()) {
            return Err(FormatError::invalid("snapshots.data", "non-finite entry"));
        }
        Ok(CMatrix::from_fn(rows, cols, |n, l| {
            let [re, im] = self.data[n][l];
            Complex64::new(re, im)
        }))
    }
}

/// Output of `simulate`, input of `solve`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SnapshotFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Provenance>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scene: Option<SceneSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub array: Option<ArraySpec>,
    pub snapshots: Vec<SnapshotBlock>,
}

impl SnapshotFile {
    /// Grid and geometry to solve on: the stored array or the default one.
    pub fn array_or_default(&self) -> ArraySpec {
        self.array.unwrap_or_default()
    }

    pub fn relative_frequencies(&self) -> Vec<f64> {
        self.snapshots.iter().map(|b| b.relative_frequency).collect()
    }

    pub fn snapshot_sets(&self) -> Result<Vec<SnapshotSet>, FormatError> {
        self.snapshots
            .iter()
            .map(|b| Ok(SnapshotSet::from_data(b.to_matrix()?)?))
            .collect()
    }

    /// One dictionary per block on the file's grid, with the block's spacing.
    pub fn dictionaries(&self) -> Result<Vec<Dictionary>, FormatError> {
        let array = self.array_or_default();
        self.snapshots
            .iter()
            .map(|b| {
                let spec = ArraySpec {
                    sensors: b.data.len(),
                    spacing_wavelengths: b.spacing_wavelengths,
                    ..array
                };
                Ok(spec.dictionary(1.0)?)
            })
            .collect()
    }

    fn validate(&self) -> Result<(), FormatError> {
        if self.snapshots.is_empty() {
            return Err(FormatError::invalid("snapshots", "at least one block is required"));
        }
        for (i, b) in self.snapshots.iter().enumerate() {
            if !(b.relative_frequency.is_finite() && b.relative_frequency > 0.0) {
                return Err(FormatError::invalid(
                    format!("snapshots[{i}].relative_frequency"),
                    "must be finite and > 0",
                ));
            }
            if !(b.spacing_wavelengths.is_finite() && b.spacing_wavelengths > 0.0) {
                return Err(FormatError::invalid(
                    format!("snapshots[{i}].spacing_wavelengths"),
                    "must be finite and > 0",
                ));
            }
            b.to_matrix()?;
        }
        let n = self.snapshots[0].data.len();
        if self.snapshots.iter().any(|b| b.data.len() != n) {
            return Err(FormatError::invalid(
                "snapshots.data",
                "all blocks must have the same number of sensors",
            ));
        }
        if let Some(scene) = &self.scene {
            scene.validate()?;
        }
        if let Some(array) = &self.array {
            array.dictionary(1.0)?;
        }
        Ok(())
    }
}

/// Reads and validates a snapshot file.
pub fn parse_snapshot_file(text: &str) -> Result<SnapshotFile, FormatError> {
    let file: SnapshotFile = serde_json::from_str(text)?;
    file.validate()?;
    Ok(file)
}

fn push_value(out: &mut String, v: f64) {
    let _ = write!(out, "{v:.16e}");
}

/// `angle_deg,value` rows after an optional comment header.
pub fn write_spectrum_csv(comment: &str, angles_deg: &[f64], values: &[f64]) -> String {
    let mut out = String::from(comment);
    out.push_str("angle_deg,value\n");
    for (a, v) in angles_deg.iter().zip(values) {
        push_value(&mut out, *a);
        out.push(',');
        push_value(&mut out, *v);
        out.push('\n');
    }
    out
}

/// Parsed spectrum CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectrumCsv {
    pub comments: Vec<String>,
    pub angles_deg: Vec<f64>,
    pub values: Vec<f64>,
}

/// Reads the output of [`write_spectrum_csv`].
pub fn parse_spectrum_csv(text: &str) -> Result<SpectrumCsv, FormatError> {
    let mut comments = Vec::new();
    let mut angles_deg = Vec::new();
    let mut values = Vec::new();
    let mut header = false;
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim_end_matches('\r');
        if let Some(c) = line.strip_prefix('#') {
            comments.push(c.trim().to_string());
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        if !header {
            if line.trim() != "angle_deg,value" {
                return Err(FormatError::Csv {
                    line: line_no,
                    message: format!("expected header `angle_deg,value`, found `{line}`"),
                });
            }
            header = true;
            continue;
        }
        let mut fields = line.split(',');
        let (Some(a), Some(v), None) = (fields.next(), fields.next(), fields.next()) else {
            return Err(FormatError::Csv {
                line: line_no,
                message: "expected two comma-separated fields".into(),
            });
        };
        let parse = |s: &str| {
            s.trim().parse::<f64>().map_err(|e| FormatError::Csv {
                line: line_no,
                message: format!("`{s}`: {e}"),
            })
        };
        angles_deg.push(parse(a)?);
        values.push(parse(v)?);
    }
    if !header {
        return Err(FormatError::Csv {
            line: text.lines().count(),
            message: "missing header".into(),
        });
    }
    Ok(SpectrumCsv {
        comments,
        angles_deg,
        values,
    })
}

/// Dictionary as CSV: one row per sensor, columns `re,im` per grid angle.
pub fn write_dictionary_csv(comment: &str, dict: &Dictionary) -> String {
    let mut out = String::from(comment);
    let header: Vec<String> = dict
        .angles()
        .iter()
        .flat_map(|a| [format!("re_{a}"), format!("im_{a}")])
        .collect();
    out.push_str(&header.join(","));
    out.push('\n');
    let a = dict.matrix();
    for n in 0..a.nrows() {
        for m in 0..a.ncols() {
            if m > 0 {
                out.push(',');
            }
            push_value(&mut out, a[(n, m)].re);
            out.push(',');
            push_value(&mut out, a[(n, m)].im);
        }
        out.push('\n');
    }
    out
}

/// `|A^H A|` as an `M x M` CSV with the grid angles as header.
pub fn write_gram_csv(comment: &str, dict: &Dictionary) -> String {
    let mut out = String::from(comment);
    let header: Vec<String> = dict.angles().iter().map(|a| format!("{a}")).collect();
    out.push_str("angle_deg,");
    out.push_str(&header.join(","));
    out.push('\n');
    let a = dict.matrix();
    let gram = a.adjoint() * a;
    for (i, angle) in dict.angles().iter().enumerate() {
        push_value(&mut out, *angle);
        for j in 0..gram.ncols() {
            out.push(',');
            push_value(&mut out, gram[(i, j)].norm());
        }
        out.push('\n');
    }
    out
}

fn opt(out: &mut String, v: Option<f64>) {
    if let Some(v) = v {
        push_value(out, v);
    }
}

/// One row per method and sweep value.
pub fn write_metrics_csv(comment: &str, table: &MetricsTable) -> String {
    let mut out = String::from(comment);
    out.push_str(
        "method,sweep_value,runs,failures,short_peak_runs,rmse_weakest_deg,\
         second_peak_p_lo_deg,second_peak_p_hi_deg,second_peak_hit_fraction,\
         true_mass,aliased_mass,aliased_mass_fraction,mean_iterations,unconverged_runs\n",
    );
    for r in &table.rows {
        let _ = write!(out, "{},", r.method);
        opt(&mut out, r.sweep_value);
        let _ = write!(out, ",{},{},{},", r.runs, r.failures, r.short_peak_runs);
        opt(&mut out, r.rmse_weakest_deg);
        out.push(',');
        opt(&mut out, r.second_peak_band_deg.map(|b| b.0));
        out.push(',');
        opt(&mut out, r.second_peak_band_deg.map(|b| b.1));
        out.push(',');
        push_value(&mut out, r.second_peak_hit_fraction);
        let _ = write!(out, ",{},{},", r.true_mass, r.aliased_mass);
        opt(&mut out, r.aliased_mass_fraction);
        out.push(',');
        opt(&mut out, r.mean_iterations);
        let _ = writeln!(out, ",{}", r.unconverged_runs);
    }
    out
}

/// Peak counts per grid angle, one column per method and sweep value.
pub fn write_histogram_csv(comment: &str, table: &MetricsTable) -> String {
    let mut out = String::from(comment);
    out.push_str("angle_deg");
    for r in &table.rows {
        match r.sweep_value {
            Some(v) => {
                let _ = write!(out, ",{}@{v}", r.method);
            }
            None => {
                let _ = write!(out, ",{}", r.method);
            }
        }
    }
    out.push('\n');
    for (i, angle) in table.angles_deg.iter().enumerate() {
        push_value(&mut out, *angle);
        for r in &table.rows {
            let _ = write!(out, ",{}", r.histogram[i]);
        }
        out.push('\n');
    }
    out
}

/// A `--set` override: dotted path and JSON value.
#[derive(Debug, Clone, PartialEq)]
pub struct Override {
    pub path: Vec<String>,
    pub value: Value,
}

/// Parses `a.b.c=value`. The value is read as JSON when it parses, otherwise
/// kept as a string, so `scene.snr_db=5`, `methods.0.method=sbl-a` and
/// `sweep.values=[0,5]` all work.
pub fn parse_override(text: &str) -> Result<Override, FormatError> {
    let bad = |reason: &str| FormatError::Override {
        text: text.to_string(),
        reason: reason.to_string(),
    };
    let (key, raw) = text.split_once('=').ok_or_else(|| bad("expected KEY=VALUE"))?;
    let key = key.trim();
    if key.is_empty() {
        return Err(bad("empty key"));
    }
    let path: Vec<String> = key.split('.').map(str::to_string).collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(bad("empty path segment"));
    }
    let value = serde_json::from_str(raw.trim()).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok(Override { path, value })
}

/// Applies an override in place. Intermediate keys must exist; the final key
/// may be new inside an existing object (typos are then caught by the strict
/// config schema). Array elements are addressed by index.
pub fn apply_override(doc: &mut Value, ov: &Override) -> Result<(), FormatError> {
    let joined = ov.path.join(".");
    let bad = |reason: String| FormatError::Override {
        text: joined.clone(),
        reason,
    };
    let (last, parents) = ov.path.split_last().expect("path is never empty");
    let mut node = doc;
    for (depth, seg) in parents.iter().enumerate() {
        let here = ov.path[..=depth].join(".");
        node = match node {
            Value::Object(map) => map
                .get_mut(seg)
                .ok_or_else(|| bad(format!("no key `{here}`")))?,
            Value::Array(items) => {
                let i: usize = seg
                    .parse()
                    .map_err(|_| bad(format!("`{here}` indexes an array")))?;
                let len = items.len();
                items
                    .get_mut(i)
                    .ok_or_else(|| bad(format!("index {i} out of range ({len} items)")))?
            }
            _ => return Err(bad(format!("`{here}` is not an object or array"))),
        };
    }
    match node {
        Value::Object(map) => {
            map.insert(last.clone(), ov.value.clone());
            Ok(())
        }
        Value::Array(items) => {
            let i: usize = last
                .parse()
                .map_err(|_| bad(format!("`{joined}` indexes an array")))?;
            let len = items.len();
            let slot = items
                .get_mut(i)
                .ok_or_else(|| bad(format!("index {i} out of range ({len} items)")))?;
            *slot = ov.value.clone();
            Ok(())
        }
        _ => Err(bad("parent is not an object or array".into())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn spectrum_csv_round_trips_bitwise() {
        let angles = vec![-90.0, -0.5, 0.0, 1e-300, 89.999_999_999];
        let values = vec![0.1 + 0.2, f64::MIN_POSITIVE, 1.0 / 3.0, 6.02e23, 0.0];
        let text = write_spectrum_csv("# seed: 4\n", &angles, &values);
        let back = parse_spectrum_csv(&text).unwrap();
        assert_eq!(back.angles_deg, angles);
        assert_eq!(back.values, values);
        assert_eq!(back.comments, vec!["seed: 4".to_string()]);
    }

    #[test]
    fn spectrum_csv_errors_carry_line() {
        let err = parse_spectrum_csv("angle_deg,value\n1,2\nx,3\n").unwrap_err();
        assert_eq!(
            err,
            FormatError::Csv {
                line: 3,
                message: "`x`: invalid float literal".into()
            }
        );
        assert!(parse_spectrum_csv("").is_err());
        assert!(parse_spectrum_csv("a,b\n").is_err());
        assert!(parse_spectrum_csv("angle_deg,value\n1,2,3\n").is_err());
    }

    #[test]
    fn scene_errors_name_the_field() {
        let text = r#"{"sources":[{"angle_deg":0,"power_db":20}],"snr_db":10,"snapshots":0}"#;
        match parse_scene(text) {
            Err(FormatError::Invalid { field, .. }) => assert_eq!(field, "snapshots"),
            other => panic!("{other:?}"),
        }
        match parse_scene("{\n\"sources\": [],\n\"snr\": 1}") {
            Err(FormatError::Json { line, message, .. }) => {
                assert_eq!(line, 3);
                assert!(message.contains("snr"), "{message}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn overrides() {
        let mut doc = json!({"scene": {"snr_db": 1.0}, "methods": [{"method": "sbl"}]});
        apply_override(&mut doc, &parse_override("scene.snr_db=5").unwrap()).unwrap();
        apply_override(&mut doc, &parse_override("methods.0.method=sbl-a").unwrap()).unwrap();
        apply_override(&mut doc, &parse_override("methods.0.phi_e=0.1").unwrap()).unwrap();
        apply_override(&mut doc, &parse_override("runs=3").unwrap()).unwrap();
        assert_eq!(
            doc,
            json!({"scene": {"snr_db": 5}, "methods": [{"method": "sbl-a", "phi_e": 0.1}], "runs": 3})
        );
        assert!(parse_override("novalue").is_err());
        assert!(parse_override("a..b=1").is_err());
        assert!(apply_override(&mut doc, &parse_override("missing.key=1").unwrap()).is_err());
        assert!(apply_override(&mut doc, &parse_override("methods.4.x=1").unwrap()).is_err());
        assert!(apply_override(&mut doc, &parse_override("runs.x=1").unwrap()).is_err());
    }

    #[test]
    fn snapshot_file_validation() {
        let ok = r#"{"snapshots":[{"relative_frequency":1,"spacing_wavelengths":0.5,"data":[[[1,0]],[[0,1]]]}]}"#;
        let file = parse_snapshot_file(ok).unwrap();
        let sets = file.snapshot_sets().unwrap();
        assert_eq!(sets[0].sensors(), 2);
        assert_eq!(file.dictionaries().unwrap()[0].sensors(), 2);
        let ragged = r#"{"snapshots":[{"relative_frequency":1,"spacing_wavelengths":0.5,"data":[[[1,0]],[]]}]}"#;
        assert!(parse_snapshot_file(ragged).is_err());
        assert!(parse_snapshot_file(r#"{"snapshots":[]}"#).is_err());
    }
}
