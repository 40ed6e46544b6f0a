use std::fs;
use std::path::{Path, PathBuf};

use covbridge::cli::{run, EXIT_OK, EXIT_PARSE, EXIT_VALIDATION, EXIT_VERIFICATION};
use covbridge::VerificationReport;
use tempfile::TempDir;

const BROWNIAN: &str = r#"{
  "system": {"A": [[0.0]], "B": [[1.0]], "T": 1.0},
  "marginals": {"Sigma0": [[0.0]], "SigmaT": [[0.0]]},
  "solver": {"steps": 400, "delta": 0.001},
  "simulation": {"paths": 400, "step": 0.005, "seed": 3, "sample_paths": 5}
}"#;

const NONSINGULAR: &str = r#"{
  "system": {"A": [[0.0, 1.0], [-1.0, -0.5]], "B": [[0.0], [1.0]], "T": 1.0},
  "marginals": {"Sigma0": [[1.0, 0.2], [0.2, 0.5]], "SigmaT": [[0.3, 0.0], [0.0, 0.4]]},
  "solver": {"steps": 1000},
  "simulation": {"paths": 2000, "step": 0.002, "seed": 7, "reverse": true, "uncontrolled": true}
}"#;

fn write_spec(dir: &TempDir, body: &str) -> PathBuf {
    let p = dir.path().join("spec.json");
    fs::write(&p, body).unwrap();
    p
}

fn cli(cmd: &str, spec: &Path, out: &Path, extra: &[&str]) -> i32 {
    let mut args = vec!["covbridge", cmd, "--quiet", "--spec", spec.to_str().unwrap(), "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    run(args)
}

fn read_csv(path: &Path) -> (Vec<String>, Vec<Vec<f64>>) {
    let text = fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    let header = lines.next().unwrap().split(',').map(str::to_string).collect();
    let rows = lines.map(|l| l.split(',').map(|v| v.parse::<f64>().unwrap()).collect()).collect();
    (header, rows)
}

#[test]
fn solve_writes_brownian_covariance() {
    let dir = TempDir::new().unwrap();
    let spec = write_spec(&dir, BROWNIAN);
    let out = dir.path().join("out");
    assert_eq!(cli("solve", &spec, &out, &[]), EXIT_OK);
    let (header, rows) = read_csv(&out.join("solution.csv"));
    assert_eq!(header, ["t", "Sigma_11", "Qinv_11", "Pinv_11", "K_11"]);
    for row in &rows {
        let t = row[0];
        assert!((row[1] - t * (1.0 - t)).abs() < 1e-8, "t={t}");
    }
    // Q⁻¹ and the gain are unavailable past the clearance window at T.
    assert!(rows.last().unwrap()[2].is_nan());
    let meta: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("metadata.json")).unwrap()).unwrap();
    assert!(meta.is_object());
}

#[test]
fn simulate_is_deterministic_and_writes_every_ensemble() {
    let dir = TempDir::new().unwrap();
    let spec = write_spec(&dir, NONSINGULAR);
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    assert_eq!(cli("simulate", &spec, &a, &[]), EXIT_OK);
    assert_eq!(cli("simulate", &spec, &b, &[]), EXIT_OK);
    assert_eq!(cli("simulate", &spec, &c, &["--seed", "8"]), EXIT_OK);
    for f in ["moments.csv", "paths.csv", "moments_uncontrolled.csv", "paths_uncontrolled.csv", "moments_reverse.csv", "paths_reverse.csv"] {
        let x = fs::read(a.join(f)).unwrap();
        assert_eq!(x, fs::read(b.join(f)).unwrap(), "{f}");
        assert_ne!(x, fs::read(c.join(f)).unwrap(), "{f}");
    }
    let (header, rows) = read_csv(&a.join("moments.csv"));
    assert_eq!(header.len(), 1 + 2 + 4 + 4 + 2);
    assert!(rows.windows(2).all(|w| w[1][0] > w[0][0]));
}

#[test]
fn verify_passes_on_well_posed_problem() {
    let dir = TempDir::new().unwrap();
    let spec = write_spec(&dir, NONSINGULAR);
    let out = dir.path().join("out");
    assert_eq!(cli("verify", &spec, &out, &[]), EXIT_OK);
    let report: VerificationReport = serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert!(report.all_passed(), "{:?}", report.first_failure());
    assert!(report.get("core.duality_forward").unwrap().passed());
    assert!(report.get("core.duality_backward").unwrap().passed());
}

#[test]
fn sweep_writes_curve() {
    let dir = TempDir::new().unwrap();
    let spec = write_spec(&dir, BROWNIAN);
    let out = dir.path().join("out");
    assert_eq!(cli("sweep", &spec, &out, &[]), EXIT_OK);
    let (header, rows) = read_csv(&out.join("sweep.csv"));
    assert_eq!(header[0], "eps");
    assert_eq!(rows.len(), 7);
    assert!(rows.last().unwrap()[1] <= 1e-6);
}

#[test]
fn exit_codes() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("out");

    let bad_json = write_spec(&dir, "{ not json");
    assert_eq!(cli("solve", &bad_json, &out, &[]), EXIT_PARSE);
    assert_eq!(run(["covbridge", "frobnicate"]), EXIT_PARSE);

    let wrong_shape = write_spec(&dir, &BROWNIAN.replace(r#""B": [[1.0]]"#, r#""B": [[1.0], [0.0]]"#));
    assert_eq!(cli("solve", &wrong_shape, &out, &[]), EXIT_VALIDATION);

    let no_paths = write_spec(&dir, &BROWNIAN.replace(r#""paths": 400"#, r#""paths": 0"#));
    assert_eq!(cli("simulate", &no_paths, &out, &[]), EXIT_VALIDATION);

    let uncontrollable = write_spec(&dir, &BROWNIAN.replace(r#""B": [[1.0]]"#, r#""B": [[0.0]]"#));
    assert_eq!(cli("solve", &uncontrollable, &out, &[]), EXIT_VALIDATION);
    assert_eq!(cli("verify", &uncontrollable, &out, &[]), EXIT_VERIFICATION);
    let report: VerificationReport = serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert!(!report.all_passed());
}
