use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn neurodyn(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_neurodyn")).current_dir(dir).args(args).env_remove("NEURODYN_THREADS").output().unwrap()
}

fn report(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(dir.join("report.json")).unwrap()).unwrap()
}

fn small_cohort(dir: &Path) {
    fs::write(dir.join("synth.json"), r#"{"synth": {"subjects": 2, "sessions": 1, "timepoints": 80}}"#).unwrap();
    let out = neurodyn(dir, &["synth", "--config", "synth.json", "--out", "syn"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn synth_connectome_metrics_chain() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    small_cohort(dir);
    fs::write(dir.join("con.json"), r#"{"bold": "syn/subject1_session1_bold.ndbf", "labels": "syn/subject1_labels.csv", "estimator": "partial"}"#)
        .unwrap();
    let out = neurodyn(dir, &["connectome", "--config", "con.json", "--out", "con"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(report(&dir.join("con"))["results"]["estimator"], "partial");

    fs::write(dir.join("met.json"), r#"{"fc": "con/fc.csv", "tau": 0.2}"#).unwrap();
    let out = neurodyn(dir, &["metrics", "--config", "met.json", "--tau-sweep", "0.1:0.9:0.1", "--out", "met"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let sweep = fs::read_to_string(dir.join("met/sweep.csv")).unwrap();
    let lines: Vec<&str> = sweep.lines().collect();
    assert_eq!(lines[0], "tau,cpl,clustering,efficiency");
    assert_eq!(lines.len(), 10);
    assert!(fs::read_to_string(dir.join("met/edges.csv")).unwrap().starts_with("source,target\n"));
}

#[test]
fn report_records_hash_seed_override_and_version() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    fs::write(dir.join("eig.json"), r#"{"mesh": {"icosphere": 1}, "modes": 6}"#).unwrap();
    let out = neurodyn(dir, &["eigenmodes", "--config", "eig.json", "--seed", "7", "--threads", "1", "--out", "a"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let r = report(&dir.join("a"));
    assert_eq!(r["seeds"]["seed"], 7);
    assert_eq!(r["resolved_config"]["seed"], 7);
    assert_eq!(r["config_hash"].as_str().unwrap().len(), 64);
    assert_eq!(r["version"], env!("CARGO_PKG_VERSION"));
    assert_eq!(fs::read_to_string(dir.join("a/eigenvalues.csv")).unwrap().lines().count(), 7);

    let out = Command::new(env!("CARGO_BIN_EXE_neurodyn"))
        .current_dir(dir)
        .args(["eigenmodes", "--config", "eig.json", "--seed", "7", "--out", "b"])
        .env("NEURODYN_THREADS", "2")
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_eq!(fs::read(dir.join("a/modes.ndbf")).unwrap(), fs::read(dir.join("b/modes.ndbf")).unwrap());
    assert_eq!(report(&dir.join("b"))["config_hash"], r["config_hash"]);
}

#[test]
fn exit_codes_follow_error_class() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    fs::write(dir.join("unknown.json"), r#"{"modes": 4, "colour": 1}"#).unwrap();
    assert_eq!(neurodyn(dir, &["eigenmodes", "--config", "unknown.json", "--out", "x"]).status.code(), Some(2));
    assert_eq!(neurodyn(dir, &["eigenmodes", "--config", "absent.json", "--out", "x"]).status.code(), Some(2));
    assert_eq!(neurodyn(dir, &["metrics", "--no-such-flag"]).status.code(), Some(2));
    fs::write(dir.join("fd.json"), r#"{"bold": "absent.ndbf"}"#).unwrap();
    assert_eq!(neurodyn(dir, &["fit-dynamics", "--config", "fd.json", "--out", "x"]).status.code(), Some(3));
    fs::write(dir.join("fc.csv"), "1,0.5\n0.5,1\n").unwrap();
    fs::write(dir.join("met.json"), r#"{"fc": "fc.csv"}"#).unwrap();
    assert_eq!(neurodyn(dir, &["metrics", "--config", "met.json", "--tau-sweep", "0.9:0.1:0.1", "--out", "x"]).status.code(), Some(2));
    assert!(!dir.join("x").exists());
}

#[test]
fn failed_run_leaves_no_partial_output() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    small_cohort(dir);
    // Labels from a different mesh size: region extraction fails after the config is accepted.
    fs::write(dir.join("labels.csv"), "vertex,label\n0,1\n1,2\n").unwrap();
    fs::write(dir.join("con.json"), r#"{"bold": "syn/subject1_session1_bold.ndbf", "labels": "labels.csv"}"#).unwrap();
    let out = neurodyn(dir, &["connectome", "--config", "con.json", "--out", "con"]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(!dir.join("con").exists());
    let leftovers: Vec<_> = fs::read_dir(dir).unwrap().filter_map(|e| e.ok()).filter(|e| e.file_name().to_string_lossy().starts_with(".neurodyn")).collect();
    assert!(leftovers.is_empty());
}

#[test]
fn abnormal_circuit_on_synthetic_groups() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let out = neurodyn(dir, &["abnormal", "--out", "ab"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let r = report(&dir.join("ab"));
    assert_eq!(r["results"]["top_edges"].as_array().unwrap().len(), 10);
    assert!(r["results"]["planted_similarity"].as_f64().unwrap() > 0.3);
    let top = fs::read_to_string(dir.join("ab/top_edges.csv")).unwrap();
    assert_eq!(top.lines().count(), 11);
}
