//! End-to-end runs of the `sbl-doa` binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Instant;

use sbl_doa::formats::{parse_snapshot_file, parse_spectrum_csv};
use sbl_doa::{run_sbl, SblProblem, SolverOptions, UncertaintyModel};
use serde_json::Value;

fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_sbl-doa"));
    cmd.env_remove("SBL_DOA_SEED")
        .env_remove("SBL_DOA_RUNS")
        .env_remove("SBL_DOA_OUT");
    cmd
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

const SINGLE_SOURCE: &str = r#"{
  "scene": {
    "sources": [{ "angle_deg": 20.0, "power_db": 0.0 }],
    "snr_db": 20.0,
    "snapshots": 30
  }
}"#;

fn simulate(dir: &Path, config: &Path, seed: &str) -> PathBuf {
    let out = dir.join(format!("sim-{seed}"));
    let o = run(&["simulate", "--config", s(config), "--out", s(&out), "--seed", seed]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    out.join("snapshots.json")
}

#[test]
fn simulate_is_deterministic_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "scene.json", SINGLE_SOURCE);
    let a = fs::read(simulate(dir.path(), &cfg, "4")).unwrap();
    let out = dir.path().join("again");
    let o = run(&["simulate", "--config", s(&cfg), "--out", s(&out), "--seed", "4"]);
    assert!(o.status.success());
    assert_eq!(a, fs::read(out.join("snapshots.json")).unwrap());
    let c = fs::read(simulate(dir.path(), &cfg, "5")).unwrap();
    assert_ne!(a, c);
    let file = parse_snapshot_file(std::str::from_utf8(&a).unwrap()).unwrap();
    let p = file.provenance.unwrap();
    assert_eq!(p.seed, 4);
    assert_eq!(p.config_sha256.len(), 64);
}

#[test]
fn bare_scene_and_experiment_configs_are_accepted() {
    let dir = tempfile::tempdir().unwrap();
    let bare = write(
        dir.path(),
        "bare.json",
        r#"{ "sources": [{ "angle_deg": 0, "power_db": 0 }], "snr_db": "inf", "snapshots": 1 }"#,
    );
    let snap = simulate(dir.path(), &bare, "1");
    let file = parse_snapshot_file(&fs::read_to_string(snap).unwrap()).unwrap();
    // Noise free broadside source: every sensor sees the same sample.
    let y = file.snapshot_sets().unwrap()[0].data().clone();
    assert!(y.iter().all(|v| (v - y[0]).norm() < 1e-12));

    let snap = simulate(dir.path(), &configs().join("aliasing.json"), "2");
    let file = parse_snapshot_file(&fs::read_to_string(snap).unwrap()).unwrap();
    assert_eq!(file.relative_frequencies(), vec![1.0, 2.0]);
    assert_eq!(file.snapshots[1].spacing_wavelengths, 1.0);
}

#[test]
fn zero_snapshots_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "scene.json", SINGLE_SOURCE);
    let out = dir.path().join("out");
    let o = run(&["simulate", "--config", s(&cfg), "--out", s(&out), "--set", "scene.snapshots=0"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("snapshots"));
    assert!(!out.exists());
}

#[test]
fn malformed_json_reports_line_and_column() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "bad.json", "{\n  \"scene\": [1,\n}");
    let o = run(&["simulate", "--config", s(&cfg), "--out", s(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 3"));
}

#[test]
fn missing_config_file_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["sweep", "--config", s(&dir.path().join("nope.json")), "--out", s(dir.path())]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn solve_matches_library_and_finds_the_source() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "scene.json", SINGLE_SOURCE);
    let snap = simulate(dir.path(), &cfg, "9");
    let out = dir.path().join("sbl");
    let o = run(&["solve", "--input", s(&snap), "--out", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    let file = parse_snapshot_file(&fs::read_to_string(&snap).unwrap()).unwrap();
    let dicts = file.dictionaries().unwrap();
    let sets = file.snapshot_sets().unwrap();
    let p = SblProblem::single(&dicts[0], &sets[0], UncertaintyModel::default()).unwrap();
    let oracle = run_sbl(&p, &SolverOptions::with_k(1)).unwrap();

    let result: Value = serde_json::from_str(&fs::read_to_string(out.join("result.json")).unwrap()).unwrap();
    let truth = dicts[0].nearest_index(20.0) as u64;
    assert_eq!(result["support"], serde_json::json!([truth]));
    assert_eq!(result["iterations"].as_u64().unwrap() as usize, oracle.iterations);

    let csv = parse_spectrum_csv(&fs::read_to_string(out.join("spectrum.csv")).unwrap()).unwrap();
    assert_eq!(csv.angles_deg, dicts[0].angles());
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&csv.values), bits(&oracle.gamma));
    assert!(csv.comments.iter().any(|c| c.contains("config_sha256")));
}

#[test]
fn sbl_cc_on_one_dictionary_writes_the_sbl_spectrum() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "scene.json", SINGLE_SOURCE);
    let snap = simulate(dir.path(), &cfg, "3");
    let mut spectra = Vec::new();
    for method in ["sbl", "sbl-cc", "sbl-mc"] {
        let out = dir.path().join(method);
        let set = format!("method={method}");
        let o = run(&["solve", "--input", s(&snap), "--out", s(&out), "--set", &set]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        spectra.push(fs::read(out.join("spectrum.csv")).unwrap());
    }
    assert_eq!(spectra[0], spectra[1]);
    assert_eq!(spectra[0], spectra[2]);
}

#[test]
fn solve_writes_per_dictionary_spectra_for_sbl_mc() {
    let dir = tempfile::tempdir().unwrap();
    let snap = simulate(dir.path(), &configs().join("smoke.json"), "1");
    let text = fs::read_to_string(&snap).unwrap();
    let mut doc: Value = serde_json::from_str(&text).unwrap();
    // Duplicate the block as a second frequency with the same geometry.
    let block = doc["snapshots"][0].clone();
    doc["snapshots"].as_array_mut().unwrap().push(block);
    let two = write(dir.path(), "two.json", &doc.to_string());
    let out = dir.path().join("mc");
    let o = run(&["solve", "--input", s(&two), "--out", s(&out), "--set", "method=sbl-mc"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let f0 = fs::read(out.join("spectrum_f0.csv")).unwrap();
    assert_eq!(f0, fs::read(out.join("spectrum_f1.csv")).unwrap());
    assert_eq!(f0, fs::read(out.join("spectrum.csv")).unwrap());
}

#[test]
fn baselines_and_exhaustive_solve() {
    let dir = tempfile::tempdir().unwrap();
    let snap = simulate(dir.path(), &configs().join("smoke.json"), "6");
    for method in ["cbf", "mvdr", "music", "exhaustive", "sbl-a", "sbl-x"] {
        let out = dir.path().join(method);
        let set = format!("method={method}");
        let o = run(&["solve", "--input", s(&snap), "--out", s(&out), "--set", &set]);
        assert!(o.status.success(), "{method}: {}", String::from_utf8_lossy(&o.stderr));
        let result: Value =
            serde_json::from_str(&fs::read_to_string(out.join("result.json")).unwrap()).unwrap();
        assert_eq!(result["support"].as_array().unwrap().len(), 2, "{method}");
        assert_eq!(out.join("spectrum.csv").exists(), method != "exhaustive");
    }
}

#[test]
fn unknown_method_lists_valid_names() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "scene.json", SINGLE_SOURCE);
    let snap = simulate(dir.path(), &cfg, "1");
    let o = run(&["solve", "--input", s(&snap), "--out", s(dir.path()), "--set", "method=lasso"]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("sbl-cc") && err.contains("music"), "{err}");
}

#[test]
fn overflowing_data_is_a_numerical_failure() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "scene.json", SINGLE_SOURCE);
    let snap = simulate(dir.path(), &cfg, "1");
    let mut doc: Value = serde_json::from_str(&fs::read_to_string(&snap).unwrap()).unwrap();
    for row in doc["snapshots"][0]["data"].as_array_mut().unwrap() {
        for v in row.as_array_mut().unwrap() {
            *v = serde_json::json!([1e200, 0.0]);
        }
    }
    let bad = write(dir.path(), "huge.json", &doc.to_string());
    let out = dir.path().join("out");
    let o = run(&["solve", "--input", s(&bad), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("iteration"));
    assert!(!out.exists());
}

#[test]
fn phi_sweep_writes_one_row_per_value() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("sweep");
    let start = Instant::now();
    let o = run(&["sweep", "--config", s(&configs().join("phi_sweep.json")), "--out", s(&out), "--runs", "1"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(start.elapsed().as_secs_f64() < 10.0);
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert_eq!(stdout.lines().count(), 4);
    assert!(stdout.lines().next().unwrap().starts_with("phi_e=0:"));
    let csv = fs::read_to_string(out.join("metrics.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().filter(|l| !l.starts_with('#')).skip(1).collect();
    assert_eq!(rows.len(), 4);
    let values: Vec<f64> = rows.iter().map(|r| r.split(',').nth(1).unwrap().parse().unwrap()).collect();
    assert_eq!(values, vec![0.0, 0.01, 0.03, 0.1]);
    let names: Vec<String> = fs::read_dir(&out)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    assert_eq!(names.len(), 3, "{names:?}");
}

#[test]
fn sweep_is_byte_identical_and_honours_env() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = configs().join("smoke.json");
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let o = run(&["sweep", "--config", s(&cfg), "--out", s(&a), "--seed", "21"]);
    assert!(o.status.success());
    let o = bin()
        .args(["sweep", "--config", s(&cfg)])
        .env("SBL_DOA_SEED", "21")
        .env("SBL_DOA_OUT", s(&b))
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["metrics.json", "metrics.csv", "histogram.csv"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let report: Value = serde_json::from_str(&fs::read_to_string(a.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(report["provenance"]["seed"], 21);
    assert_eq!(report["config"]["seed"], 21);
}

#[test]
fn sweep_rejects_unknown_override_paths() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&[
        "sweep",
        "--config",
        s(&configs().join("smoke.json")),
        "--out",
        s(dir.path()),
        "--set",
        "scene.colour=red",
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn gram_has_sensor_count_on_the_diagonal() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("gram");
    let o = run(&["gram", "--out", s(&out), "--set", "sensors=6", "--set", "grid_step_deg=10"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(out.join("gram_f0.csv")).unwrap();
    let rows: Vec<Vec<f64>> = text
        .lines()
        .filter(|l| !l.starts_with('#'))
        .skip(1)
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), 19);
    for (i, r) in rows.iter().enumerate() {
        assert!((r[i + 1] - 6.0).abs() < 1e-12);
    }
    assert!(out.join("dictionary_f0.csv").exists());

    let out2 = dir.path().join("gram2");
    let o = run(&["gram", "--config", s(&configs().join("aliasing.json")), "--out", s(&out2)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out2.join("gram_f1.csv").exists());
}
