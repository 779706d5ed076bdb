//! Acceptance suite: ten criteria, one PASS/FAIL line each.
//!
//! Runs without the libtest harness so the lines always reach stdout. Pass
//! criterion numbers as arguments to run a subset, e.g.
//! `cargo test -p sbl-doa-cli --test acceptance -- 1 9 10`.
//!
//! Failed criteria are reported but only fail the process when
//! `SBL_DOA_ACCEPTANCE_STRICT=1` is set.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sbl_doa::baselines::support_residual;
use sbl_doa::experiments::MetricsTable;
use sbl_doa::formats::{parse_experiment_config, parse_snapshot_file, parse_spectrum_csv, write_spectrum_csv};
use sbl_doa::*;

type Check = Result<String, String>;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn cgauss(r: &mut ChaCha8Rng, rows: usize, cols: usize, variance: f64) -> CMatrix {
    let s = (variance / 2.0).sqrt();
    CMatrix::from_fn(rows, cols, |_, _| {
        let re: f64 = r.sample(StandardNormal);
        let im: f64 = r.sample(StandardNormal);
        Complex64::new(re * s, im * s)
    })
}

fn random_dictionary(r: &mut ChaCha8Rng, n: usize, m: usize) -> Dictionary {
    let mut angles: Vec<f64> = (0..m).map(|_| r.random_range(-85.0..85.0)).collect();
    angles.sort_by(f64::total_cmp);
    Dictionary::from_angles(angles, n, 0.5).unwrap()
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn load_config(name: &str) -> ExperimentConfig {
    parse_experiment_config(&fs::read_to_string(configs().join(name)).unwrap()).unwrap()
}

fn ensure(ok: bool, detail: String) -> Check {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

/// 1. One update step at `S_y = Sigma_y(gamma*)` returns `gamma*`.
fn fixed_point_identity() -> Check {
    let mut r = rng(1001);
    let mut worst: f64 = 0.0;
    for i in 0..50 {
        let dict = random_dictionary(&mut r, 8, 20);
        let gamma: Vec<f64> = (0..20)
            .map(|_| if r.random_bool(0.3) { 0.0 } else { r.random_range(0.05..5.0) })
            .collect();
        let unc = if i % 2 == 0 {
            UncertaintyModel::default()
        } else {
            UncertaintyModel::new(r.random_range(0.0..0.1), r.random_range(0.0..1.0)).unwrap()
        };
        let sigma2 = r.random_range(0.05..1.0);
        let cov = DataCovariance::assemble(&gamma, &unc, &dict, sigma2).map_err(|e| e.to_string())?;
        let s = cov.matrix().clone();
        let next = gamma_update_step(&gamma, &cov, &s, &dict, &unc, 1.0).map_err(|e| e.to_string())?;
        let scale = gamma.iter().cloned().fold(0.0, f64::max);
        let err = next.iter().zip(&gamma).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max) / scale;
        worst = worst.max(err);
    }
    ensure(worst <= 1e-10, format!("max relative deviation {worst:.2e} over 50 instances (tol 1e-10)"))
}

/// 2. Analytic evidence gradient against central differences.
fn gradient_check() -> Check {
    let mut r = rng(1002);
    let mut worst: f64 = 0.0;
    let h = 1e-6;
    for _ in 0..20 {
        let dict = random_dictionary(&mut r, 4, 6);
        let gamma: Vec<f64> = (0..6).map(|_| r.random_range(0.2..2.0)).collect();
        let unc = UncertaintyModel::new(r.random_range(0.0..0.1), r.random_range(0.0..0.5)).unwrap();
        let sigma2 = r.random_range(0.2..1.0);
        let set = SnapshotSet::from_data(cgauss(&mut r, 4, 5, 1.0)).unwrap();
        let grad = solver::log_evidence_gradient(&gamma, sigma2, &dict, &unc, &set).map_err(|e| e.to_string())?;
        let mut fd = Vec::new();
        for i in 0..6 {
            let mut plus = gamma.clone();
            let mut minus = gamma.clone();
            plus[i] += h;
            minus[i] -= h;
            let lp = log_evidence(&plus, sigma2, &dict, &unc, &set).map_err(|e| e.to_string())?;
            let lm = log_evidence(&minus, sigma2, &dict, &unc, &set).map_err(|e| e.to_string())?;
            fd.push((lp - lm) / (2.0 * h));
        }
        let scale = grad.iter().map(|g| g.abs()).fold(0.0, f64::max);
        let err = grad.iter().zip(&fd).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max) / scale;
        worst = worst.max(err);
    }
    ensure(worst <= 1e-6, format!("max relative error {worst:.2e} over 20 instances (tol 1e-6)"))
}

/// 3. Noise-only data: mean noise estimate with K = 0.
fn noise_estimate_unbiased() -> Check {
    let mut r = rng(1003);
    let dict = ArraySpec::default().dictionary(1.0).unwrap();
    let runs = 2000;
    let mut sum = 0.0;
    for _ in 0..runs {
        let set = SnapshotSet::from_data(cgauss(&mut r, 20, 30, 0.1)).unwrap();
        sum += estimate_noise(set.sample_covariance(), &dict, &[], 0).map_err(|e| e.to_string())?;
    }
    let mean = sum / runs as f64;
    let rel = (mean / 0.1 - 1.0).abs();
    ensure(rel < 0.02, format!("mean estimate {mean:.5} ({:.2}% off, tol 2%)", rel * 100.0))
}

fn row<'a>(table: &'a MetricsTable, method: &str, v: Option<f64>) -> &'a MetricsRow {
    table.row(method, v).unwrap_or_else(|| panic!("no row {method} {v:?}"))
}

/// 4. Weight-error model narrows the second-peak percentile band.
fn percentile_band_contracts() -> Check {
    let config = load_config("two_source.json");
    let table = run_experiment(&config).map_err(|e| e.to_string())?;
    let base = row(&table, "gamma_e=0", None);
    let robust = row(&table, "gamma_e=0.75", None);
    let (wb, wr) = (
        base.second_peak_band_width_deg.unwrap_or(f64::NAN),
        robust.second_peak_band_width_deg.unwrap_or(f64::NAN),
    );
    let (hb, hr) = (base.second_peak_hit_fraction, robust.second_peak_hit_fraction);
    ensure(
        wr < wb && hr > hb,
        format!(
            "band width {wb:.1} -> {wr:.1} deg (bands {:?} -> {:?}), hit fraction {hb:.3} -> {hr:.3}, runs {}",
            base.second_peak_band_deg, robust.second_peak_band_deg, config.runs
        ),
    )
}

/// 5. RMSE ranking on the three-source scene.
fn rmse_ranking() -> Check {
    let config = load_config("three_source.json");
    let table = run_experiment(&config).map_err(|e| e.to_string())?;
    let rmse = |m: &str, v: f64| row(&table, m, Some(v)).rmse_weakest_deg.unwrap_or(f64::INFINITY);
    let mut ok = true;
    let mut parts = Vec::new();
    for &snr in &[-5.0, 0.0, 5.0, 10.0] {
        let (sbl, mvdr, a, x) = (rmse("sbl", snr), rmse("mvdr", snr), rmse("sbl-a", snr), rmse("sbl-x", snr));
        if snr >= 0.0 {
            ok &= sbl <= mvdr;
        }
        if snr <= 0.0 {
            ok &= a <= sbl && x <= sbl;
        }
        parts.push(format!(
            "{snr} dB: sbl {sbl:.3} mvdr {mvdr:.3} music {:.3} sbl-a {a:.3} sbl-x {x:.3}",
            rmse("music", snr)
        ));
    }
    ensure(ok, parts.join("; "))
}

/// 6. Exhaustive search never loses to SBL's top-2 support on its own
/// objective.
fn exhaustive_optimality() -> Check {
    let dict = build_dictionary(-55.0, 55.0, 10.0, 8, 0.5).unwrap();
    let mut violations = 0;
    let mut sbl_optimal = 0;
    for seed in 0..100u64 {
        let mut r = rng(6000 + seed);
        let a = r.random_range(0..dict.len());
        let mut b = r.random_range(0..dict.len());
        while b == a {
            b = r.random_range(0..dict.len());
        }
        let x = cgauss(&mut r, 2, 10, 1.0);
        let y = dict.columns(&[a, b]) * x + cgauss(&mut r, 8, 10, 0.5);
        let set = SnapshotSet::from_data(y.clone()).unwrap();
        let ex = exhaustive_search(&y, &dict, 2, None).map_err(|e| e.to_string())?;
        let p = SblProblem::single(&dict, &set, UncertaintyModel::default()).map_err(|e| e.to_string())?;
        let sbl = run_sbl(&p, &SolverOptions::with_k(2)).map_err(|e| e.to_string())?;
        let r_sbl = support_residual(&y, &dict, &sbl.support).map_err(|e| e.to_string())?;
        if ex.residual > r_sbl * (1.0 + 1e-12) {
            violations += 1;
        }
        if (ex.residual - r_sbl).abs() <= 1e-12 * r_sbl {
            sbl_optimal += 1;
        }
    }
    ensure(
        violations == 0,
        format!("{violations} violations in 100 instances; SBL support attains the optimum in {sbl_optimal}"),
    )
}

/// 7. Joint multi-frequency processing suppresses aliases.
fn aliasing_suppression() -> Check {
    let config = load_config("aliasing.json");
    let table = run_experiment(&config).map_err(|e| e.to_string())?;
    let mc = row(&table, "sbl-mc", None);
    let cc = row(&table, "sbl-cc", None);
    let (fm, fc) = (
        mc.aliased_mass_fraction.unwrap_or(f64::NAN),
        cc.aliased_mass_fraction.unwrap_or(f64::NAN),
    );
    ensure(
        fc < 0.01 && fm > 0.05,
        format!(
            "aliased/true mass: sbl-cc {fc:.4} ({}/{}), sbl-mc {fm:.4} ({}/{}), alias bins {:?}",
            cc.aliased_mass, cc.true_mass, mc.aliased_mass, mc.true_mass, table.alias_bins
        ),
    )
}

/// 8. On tiny problems the fixed point reaches the best evidence on a dense
/// grid.
fn tiny_evidence_oracle() -> Check {
    let levels: Vec<f64> = (0..=16).map(|i| i as f64 * 0.25).collect();
    let mut failures = Vec::new();
    for seed in 0..100u64 {
        let mut r = rng(8000 + seed);
        let dict = random_dictionary(&mut r, 3, 4);
        let truth: Vec<f64> = (0..4)
            .map(|_| if r.random_bool(0.5) { 0.0 } else { r.random_range(0.5..3.0) })
            .collect();
        let sigma2 = 0.5;
        let x = CMatrix::from_fn(4, 20, |m, _| {
            let re: f64 = r.sample(StandardNormal);
            let im: f64 = r.sample(StandardNormal);
            Complex64::new(re, im) * (truth[m] / 2.0).sqrt()
        });
        let y = dict.matrix() * x + cgauss(&mut r, 3, 20, sigma2);
        let set = SnapshotSet::from_data(y).unwrap();
        let unc = UncertaintyModel::default();
        let options = SolverOptions {
            epsilon: 1e-12,
            max_iterations: 200_000,
            sigma2_init: sigma2,
            estimate_noise: false,
            ..SolverOptions::with_k(1)
        };
        let p = SblProblem::single(&dict, &set, unc).map_err(|e| e.to_string())?;
        let fixed = run_sbl(&p, &options).map_err(|e| e.to_string())?;
        let at_fixed = log_evidence(&fixed.gamma, sigma2, &dict, &unc, &set).map_err(|e| e.to_string())?;
        let mut best = f64::NEG_INFINITY;
        for &a in &levels {
            for &b in &levels {
                for &c in &levels {
                    for &d in &levels {
                        if let Ok(v) = log_evidence(&[a, b, c, d], sigma2, &dict, &unc, &set) {
                            best = best.max(v);
                        }
                    }
                }
            }
        }
        if at_fixed < best - 1e-3 {
            failures.push(format!("seed {seed}: {at_fixed:.4} < {best:.4}"));
        }
    }
    let passed = 100 - failures.len();
    let mut detail = format!("{passed}/100 instances within 1e-3 of the grid maximum (need 90)");
    if !failures.is_empty() {
        detail.push_str(&format!("; failures: {}", failures.join(", ")));
    }
    ensure(passed >= 90, detail)
}

/// 9. Collapse identities.
fn collapse_identities() -> Check {
    let mut r = rng(1009);
    let bits = |t: &[Vec<f64>]| -> Vec<u64> { t.iter().flatten().map(|v| v.to_bits()).collect() };
    for _ in 0..5 {
        let dict = random_dictionary(&mut r, 6, 30);
        let set = SnapshotSet::from_data(cgauss(&mut r, 6, 8, 1.0)).unwrap();
        let unc = UncertaintyModel::new(r.random_range(0.0..0.05), r.random_range(0.0..0.5)).unwrap();
        let p = SblProblem::single(&dict, &set, unc).map_err(|e| e.to_string())?;
        let options = SolverOptions {
            record_trajectory: true,
            ..SolverOptions::with_k(2)
        };
        let sbl = run_sbl(&p, &options).map_err(|e| e.to_string())?;
        let cc = run_sbl_cc(&p, &options).map_err(|e| e.to_string())?;
        let mc = run_sbl_mc(&p, &options).map_err(|e| e.to_string())?;
        let t = bits(&sbl.gamma_trajectory);
        if t != bits(&cc.gamma_trajectory) || t != bits(&mc.gamma_trajectory) {
            return Err("F = 1 trajectories differ".into());
        }
    }
    let mut config = load_config("smoke.json");
    config.methods = vec![
        MethodSpec::new(MethodKind::Sbl),
        MethodSpec::new(MethodKind::SblA).with_uncertainty(0.0, 0.0),
        MethodSpec::new(MethodKind::SblX).with_uncertainty(0.0, 0.0),
    ];
    let table = run_experiment(&config).map_err(|e| e.to_string())?;
    for r in &table.rows {
        let base = row(&table, "sbl", r.sweep_value);
        let mut same = r.clone();
        same.method = base.method.clone();
        same.kind = base.kind;
        if &same != base {
            return Err(format!("{} with zero uncertainty differs from sbl", r.method));
        }
    }
    Ok("F = 1 SBL-MC, SBL-CC and SBL trajectories bitwise equal on 5 instances; \
        SBL-A/SBL-x at zero uncertainty reproduce SBL metrics"
        .into())
}

fn cli(args: &[&str]) -> Result<std::process::Output, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_sbl-doa"))
        .args(args)
        .env_remove("SBL_DOA_SEED")
        .env_remove("SBL_DOA_RUNS")
        .env_remove("SBL_DOA_OUT")
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.code() != Some(0) {
        return Err(format!("{args:?} exited {:?}: {}", out.status.code(), String::from_utf8_lossy(&out.stderr)));
    }
    Ok(out)
}

fn read_dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().into_string().unwrap(), fs::read(e.path()).unwrap())
        })
        .collect();
    files.sort();
    files
}

/// 10. simulate -> solve -> sweep, twice, byte for byte.
fn cli_round_trip() -> Check {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let smoke = configs().join("smoke.json");
    let smoke = smoke.to_str().unwrap();
    let mut outputs = Vec::new();
    for pass in ["a", "b"] {
        let root = tmp.path().join(pass);
        let sim = root.join("sim");
        let solve = root.join("solve");
        let sweep = root.join("sweep");
        cli(&["simulate", "--config", smoke, "--seed", "7", "--out", sim.to_str().unwrap()])?;
        let snap = sim.join("snapshots.json");
        cli(&["solve", "--input", snap.to_str().unwrap(), "--out", solve.to_str().unwrap()])?;
        cli(&["sweep", "--config", smoke, "--seed", "7", "--out", sweep.to_str().unwrap()])?;
        outputs.push([read_dir_bytes(&sim), read_dir_bytes(&solve), read_dir_bytes(&sweep)]);
    }
    if outputs[0] != outputs[1] {
        return Err("repeated pipeline output differs".into());
    }

    let root = tmp.path().join("a");
    let file = parse_snapshot_file(&fs::read_to_string(root.join("sim/snapshots.json")).unwrap())
        .map_err(|e| e.to_string())?;
    let dicts = file.dictionaries().map_err(|e| e.to_string())?;
    let sets = file.snapshot_sets().map_err(|e| e.to_string())?;
    let p = SblProblem::single(&dicts[0], &sets[0], UncertaintyModel::default()).map_err(|e| e.to_string())?;
    let direct = run_sbl(&p, &SolverOptions::with_k(2)).map_err(|e| e.to_string())?;
    let text = fs::read_to_string(root.join("solve/spectrum.csv")).unwrap();
    let csv = parse_spectrum_csv(&text).map_err(|e| e.to_string())?;
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    if bits(&csv.values) != bits(&direct.gamma) || bits(&csv.angles_deg) != bits(dicts[0].angles()) {
        return Err("spectrum CSV does not parse back to the solver output".into());
    }
    let comment: String = csv.comments.iter().map(|c| format!("# {c}\n")).collect();
    if write_spectrum_csv(&comment, &csv.angles_deg, &csv.values) != text {
        return Err("spectrum CSV does not re-serialize identically".into());
    }
    let files: usize = outputs[0].iter().map(|d| d.len()).sum();
    Ok(format!("{files} files byte-identical across two pipeline runs; spectrum CSV round-trips bit-exactly"))
}

fn main() {
    let criteria: [(u32, &str, fn() -> Check); 10] = [
        (1, "fixed-point identity", fixed_point_identity),
        (2, "evidence gradient vs finite differences", gradient_check),
        (3, "noise estimate unbiased", noise_estimate_unbiased),
        (4, "second-peak band contracts with gamma_e = 0.75", percentile_band_contracts),
        (5, "three-source RMSE ranking", rmse_ranking),
        (6, "exhaustive search optimality", exhaustive_optimality),
        (7, "aliasing suppressed by SBL-CC, not SBL-MC", aliasing_suppression),
        (8, "tiny-instance evidence oracle", tiny_evidence_oracle),
        (9, "collapse identities", collapse_identities),
        (10, "CLI round trip", cli_round_trip),
    ];
    let selected: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = Vec::new();
    for (n, name, check) in criteria {
        if !selected.is_empty() && !selected.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(check).unwrap_or_else(|_| Err("panicked".into()));
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("acceptance {n:>2} PASS [{secs:.1}s] {name}: {detail}"),
            Err(detail) => {
                println!("acceptance {n:>2} FAIL [{secs:.1}s] {name}: {detail}");
                failed.push(n);
            }
        }
    }
    if !failed.is_empty() {
        println!("acceptance: failed criteria {failed:?}");
        if std::env::var_os("SBL_DOA_ACCEPTANCE_STRICT").is_some_and(|v| v == "1") {
            std::process::exit(1);
        }
    }
}
