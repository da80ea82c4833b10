use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_kolmo-chain"))
}

fn run(cmd: &str, cfg: Option<&Path>, out: &Path, extra: &[&str]) -> Output {
    let mut c = bin();
    c.arg(cmd).arg("--out").arg(out).args(extra).env_remove("KOLMO_CHAIN_THREADS");
    if let Some(p) = cfg {
        c.arg("--config").arg(p);
    }
    c.output().expect("binary runs")
}

fn write_cfg(dir: &Path, name: &str, body: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, body).unwrap();
    p
}

fn run_dirs(out: &Path) -> Vec<PathBuf> {
    match std::fs::read_dir(out) {
        Ok(rd) => {
            let mut v: Vec<PathBuf> = rd.filter_map(|e| e.ok()).map(|e| e.path()).collect();
            v.sort();
            v
        }
        Err(_) => Vec::new(),
    }
}

fn only_run(out: &Path) -> PathBuf {
    let dirs = run_dirs(out);
    assert_eq!(dirs.len(), 1, "{dirs:?}");
    dirs[0].clone()
}

fn json(p: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

#[test]
fn unknown_key_is_rejected_without_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("runs");
    let cfg = write_cfg(dir.path(), "bad.toml", "[params]\nband_limit = 20.0\nbogus = 1\n");
    let o = run("gsp-check", Some(&cfg), &out, &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(run_dirs(&out).is_empty());

    let cfg = write_cfg(dir.path(), "bad_model.toml", "[model]\nkind = \"kolmogorov-linear\"\nn = 2\nd = 1\nextra = 3\n");
    assert_eq!(run("gsp-check", Some(&cfg), &out, &[]).status.code(), Some(2));
    assert!(run_dirs(&out).is_empty());
}

#[test]
fn command_mismatch_and_bad_values_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("runs");
    let cfg = write_cfg(dir.path(), "m.toml", "command = \"peano\"\n");
    assert_eq!(run("gsp-check", Some(&cfg), &out, &[]).status.code(), Some(2));

    let cfg = write_cfg(dir.path(), "z.toml", "[params]\npaths = 0\n");
    assert_eq!(run("peano", Some(&cfg), &out, &[]).status.code(), Some(2));

    let cfg = write_cfg(dir.path(), "a.toml", "[params]\nalpha = 1.5\n");
    assert_eq!(run("peano", Some(&cfg), &out, &[]).status.code(), Some(2));

    let cfg = write_cfg(dir.path(), "pm.toml", "[model]\nkind = \"kolmogorov-linear\"\nn = 2\nd = 1\n");
    assert_eq!(run("peano", Some(&cfg), &out, &[]).status.code(), Some(2));
    assert!(run_dirs(&out).is_empty());
}

#[test]
fn gsp_check_on_kolmogorov_writes_spectrum() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("runs");
    let o = run("gsp-check", None, &out, &[]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let run_dir = only_run(&out);
    assert!(run_dir.file_name().unwrap().to_string_lossy().starts_with("gsp-check-"));
    let report = json(&run_dir.join("report.json"));
    assert_eq!(report["pass"], Value::Bool(true));
    let dev = report["headline"]["kolmogorov_max_deviation"].as_f64().unwrap();
    assert!(dev < 1e-6);

    let mut rdr = csv::Reader::from_path(run_dir.join("spectrum.csv")).unwrap();
    let headers: Vec<String> = rdr.headers().unwrap().iter().map(String::from).collect();
    assert_eq!(headers, ["duration", "lambda_min", "lambda_max"]);
    assert!(rdr.records().count() >= 1);

    let manifest = json(&run_dir.join("manifest.json"));
    let hash = manifest["hash"].as_str().unwrap();
    assert!(run_dir.to_string_lossy().ends_with(&hash[..12]));
    assert_eq!(report["manifest_hash"].as_str().unwrap(), hash);
}

#[test]
fn peano_sweep_has_one_row_per_alpha() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("runs");
    let cfg = write_cfg(
        dir.path(),
        "s.toml",
        "command = \"peano-sweep\"\nseed = 3\n[params]\nalphas = [0.15, 0.3, 0.8]\npaths = 200\nsteps = 1000\n",
    );
    let o = run("peano-sweep", Some(&cfg), &out, &[]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let mut rdr = csv::Reader::from_path(only_run(&out).join("peano.csv")).unwrap();
    let alpha_col = rdr.headers().unwrap().iter().position(|h| h == "alpha").unwrap();
    let alphas: Vec<f64> = rdr.records().map(|r| r.unwrap()[alpha_col].parse().unwrap()).collect();
    assert_eq!(alphas, [0.15, 0.3, 0.8]);
}

#[test]
fn json_format_matches_csv_tables() {
    let dir = tempfile::tempdir().unwrap();
    let body = "[params.simulation]\npaths = 500\nsteps = 10\n";
    let cfg = write_cfg(dir.path(), "sim.toml", body);
    let csv_out = dir.path().join("csv");
    let json_out = dir.path().join("json");
    assert!(run("simulate", Some(&cfg), &csv_out, &[]).status.success());
    assert!(run("simulate", Some(&cfg), &json_out, &["--format", "json"]).status.success());
    let (c, j) = (only_run(&csv_out), only_run(&json_out));
    // Format is part of the hash.
    assert_ne!(c.file_name(), j.file_name());

    let tables = json(&j.join("tables.json"));
    let moments = &tables["moments"];
    let mut rdr = csv::Reader::from_path(c.join("moments.csv")).unwrap();
    let headers: Vec<String> = rdr.headers().unwrap().iter().map(String::from).collect();
    let cols: Vec<String> = moments["columns"].as_array().unwrap().iter().map(|v| v.as_str().unwrap().into()).collect();
    assert_eq!(headers, cols);
    let rows = moments["rows"].as_array().unwrap();
    let records: Vec<csv::StringRecord> = rdr.records().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), records.len());
    let value_col = headers.iter().position(|h| h == "value").unwrap();
    for (row, rec) in rows.iter().zip(&records) {
        let a = row["value"].as_f64().unwrap();
        let b: f64 = rec[value_col].parse().unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }
    assert_eq!(
        std::fs::read_to_string(c.join("long.csv")).unwrap(),
        std::fs::read_to_string(j.join("long.csv")).unwrap()
    );
}

#[test]
fn repeat_run_is_verified_and_tampering_detected() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("runs");
    let cfg = write_cfg(dir.path(), "p.toml", "[params]\npaths = 200\nsteps = 500\n");
    assert!(run("peano", Some(&cfg), &out, &["--seed", "5"]).status.success());
    let run_dir = only_run(&out);
    let before = std::fs::read_to_string(run_dir.join("report.json")).unwrap();

    let o = run("peano", Some(&cfg), &out, &["--seed", "5", "--threads", "3"]);
    assert!(o.status.success());
    assert!(String::from_utf8_lossy(&o.stdout).contains("reproduced"));
    assert_eq!(only_run(&out), run_dir);
    assert_eq!(std::fs::read_to_string(run_dir.join("report.json")).unwrap(), before);

    let o = run("peano", Some(&run_dir.join("manifest.json")), &out, &[]);
    assert!(o.status.success());
    assert_eq!(only_run(&out), run_dir);

    let mut report = json(&run_dir.join("report.json"));
    let s = report["headline"]["survival_hat"].as_f64().unwrap();
    report["headline"]["survival_hat"] = Value::from(s + 1e-9);
    std::fs::write(run_dir.join("report.json"), serde_json::to_string(&report).unwrap()).unwrap();
    let o = run("peano", Some(&cfg), &out, &["--seed", "5"]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn tampered_manifest_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("runs");
    assert!(run("gsp-check", None, &out, &[]).status.success());
    let run_dir = only_run(&out);
    let mut m = json(&run_dir.join("manifest.json"));
    m["config"]["seed"] = Value::from(99u64);
    let p = write_cfg(dir.path(), "manifest.json", &serde_json::to_string(&m).unwrap());
    assert_eq!(run("gsp-check", Some(&p), &out, &[]).status.code(), Some(2));
}

#[test]
fn thread_count_from_environment_does_not_change_results() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("runs");
    let cfg = write_cfg(dir.path(), "k.toml", "[params]\npaths = 300\nsteps = 20\n");
    let o = bin()
        .args(["khasminskii", "--out"])
        .arg(&out)
        .arg("--config")
        .arg(&cfg)
        .env("KOLMO_CHAIN_THREADS", "1")
        .output()
        .unwrap();
    assert!(o.status.success());
    let o = bin()
        .args(["khasminskii", "--out"])
        .arg(&out)
        .arg("--config")
        .arg(&cfg)
        .env("KOLMO_CHAIN_THREADS", "4")
        .output()
        .unwrap();
    assert!(o.status.success());
    assert!(String::from_utf8_lossy(&o.stdout).contains("reproduced"));
}
