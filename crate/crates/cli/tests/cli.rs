use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const SMALL_DATA: &str =
    r#"{"source":"synthetic","n_per_class":100,"test_per_class":20,"dims":8,"classes":3,"margin":4.0,"seed":1}"#;

fn sigeo(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sigeo"))
        .args(args)
        .env_remove("SIGEO_DATA_DIR")
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, name: &str, body: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, body).unwrap();
    p
}

fn run_ok(args: &[&str]) -> Output {
    let out = sigeo(args);
    assert!(
        out.status.success(),
        "sigeo {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn read(p: PathBuf) -> Vec<u8> {
    std::fs::read(&p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn theory_manifest_rerun_and_workers_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        "t.json",
        &format!(r#"{{"version":1,"dataset":{SMALL_DATA},"theory":{{"widths":[2,4,8],"sgd":{{"batch_size":16}}}}}}"#),
    );
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    run_ok(&["validate-theory", "--config", s(&cfg), "--out-dir", s(&a), "--workers", "1"]);
    let manifest = a.join("manifest.json");
    run_ok(&["validate-theory", "--config", s(&manifest), "--out-dir", s(&b), "--workers", "4"]);
    for f in ["theory_validation.csv", "theory_trends.json", "manifest.json"] {
        assert_eq!(read(a.join(f)), read(b.join(f)), "{f} differs");
    }
    let csv = String::from_utf8(read(a.join("theory_validation.csv"))).unwrap();
    assert_eq!(csv.lines().count(), 1 + 3 * 3);
}

#[test]
fn search_manifest_rerun_and_workers_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        "s.json",
        &format!(
            r#"{{"version":1,"dataset":{SMALL_DATA},"space":{{"kind":"mlp","min_depth":1,"max_depth":2}},
            "evolution":{{"population_size":6,"iterations":4,"tournament_size":3,"children_per_iter":2}},
            "protocol":{{"sgd":{{"batch_size":16}}}}}}"#
        ),
    );
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    run_ok(&["search", "--config", s(&cfg), "--out-dir", s(&a), "--workers", "1"]);
    run_ok(&["search", "--config", s(&a.join("manifest.json")), "--out-dir", s(&b), "--workers", "4"]);
    for f in ["evo_history.csv", "evo_history.json", "best_genotype.json", "manifest.json"] {
        assert_eq!(read(a.join(f)), read(b.join(f)), "{f} differs");
    }
    let csv = String::from_utf8(read(a.join("evo_history.csv"))).unwrap();
    assert_eq!(csv.lines().count(), 1 + 5);
}

#[test]
fn correlate_manifest_rerun_is_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        "c.json",
        &format!(
            r#"{{"version":1,"dataset":{SMALL_DATA},"study":{{"n_genotypes":5,"levels":[0.0,0.4],"sgd":{{"batch_size":16}}}}}}"#
        ),
    );
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    run_ok(&["correlate", "--config", s(&cfg), "--out-dir", s(&a), "--workers", "3"]);
    run_ok(&["correlate", "--config", s(&a.join("manifest.json")), "--out-dir", s(&b), "--workers", "1"]);
    for f in ["correlation_report.csv", "records.json", "manifest.json"] {
        assert_eq!(read(a.join(f)), read(b.join(f)), "{f} differs");
    }
    let csv = String::from_utf8(read(a.join("correlation_report.csv"))).unwrap();
    assert!(csv.starts_with("proxy,level,spearman,kendall,n,degenerate\n"));
    assert!(csv.lines().any(|l| l.starts_with("sigeo,0.4,")));
}

#[test]
fn planted_param_count_search_finds_smallest_network() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        "s.json",
        &format!(
            r#"{{"version":1,"dataset":{SMALL_DATA},"space":{{"kind":"mlp","min_depth":2,"max_depth":2}},
            "objective":"neg_param_count","evolution":{{"population_size":16,"iterations":200,"tournament_size":8,"children_per_iter":4}}}}"#
        ),
    );
    let out = tmp.path().join("o");
    run_ok(&["search", "--config", s(&cfg), "--out-dir", s(&out)]);
    let best: Value = serde_json::from_slice(&read(out.join("best_genotype.json"))).unwrap();
    assert_eq!(best["variant"], "mlp");
    assert_eq!(best["widths"], serde_json::json!([2, 2]));
}

#[test]
fn zero_iteration_search_reports_initial_population() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        "s.json",
        &format!(r#"{{"version":1,"dataset":{SMALL_DATA},"objective":"neg_param_count"}}"#),
    );
    let out = tmp.path().join("o");
    run_ok(&["search", "--config", s(&cfg), "--out-dir", s(&out), "--iterations", "0"]);
    let csv = String::from_utf8(read(out.join("evo_history.csv"))).unwrap();
    assert_eq!(csv.lines().count(), 2);
    let manifest: Value = serde_json::from_slice(&read(out.join("manifest.json"))).unwrap();
    assert_eq!(manifest["evolution"]["iterations"], 0);
}

#[test]
fn score_preset_matches_explicit_weights() {
    let tmp = tempfile::tempdir().unwrap();
    let g = write_config(tmp.path(), "g.json", r#"{"variant":"mlp","widths":[8]}"#);
    let preset = write_config(
        tmp.path(),
        "p.json",
        &format!(r#"{{"version":1,"dataset":{SMALL_DATA},"protocol":{{"weights":[1.0,0.0,0.0],"sgd":{{"batch_size":16}}}}}}"#),
    );
    let plain = write_config(
        tmp.path(),
        "q.json",
        &format!(r#"{{"version":1,"dataset":{SMALL_DATA},"protocol":{{"sgd":{{"batch_size":16}}}}}}"#),
    );
    let a = run_ok(&["score", "--config", s(&preset), "--genotype", s(&g), "--out-dir", s(&tmp.path().join("a"))]);
    let b = run_ok(&[
        "score",
        "--config",
        s(&plain),
        "--genotype",
        s(&g),
        "--weights",
        "zico",
        "--out-dir",
        s(&tmp.path().join("b")),
    ]);
    assert_eq!(a.stdout, b.stdout);
    let v: Value = serde_json::from_slice(&a.stdout).unwrap();
    assert!(v["value"].as_f64().unwrap().is_finite());
    assert_eq!(v["lambda"], serde_json::json!([1.0, 0.0, 0.0]));
    assert_eq!(read(tmp.path().join("a/score.json")), read(tmp.path().join("b/score.json")));
}

#[test]
fn score_without_genotype_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "q.json", &format!(r#"{{"version":1,"dataset":{SMALL_DATA}}}"#));
    let out = sigeo(&["score", "--config", s(&cfg), "--out-dir", s(&tmp.path().join("o"))]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn print_config_shows_effective_config_and_writes_nothing() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("o");
    let out = run_ok(&["validate-theory", "--print-config", "--seed", "5", "--out-dir", s(&out_dir)]);
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["version"], 1);
    assert_eq!(v["theory"]["seed"], 5);
    assert_eq!(v["theory"]["widths"].as_array().unwrap().len(), 24);
    assert!(!out_dir.exists());
}

#[test]
fn flags_override_config_values() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "s.json", r#"{"version":1,"seed":3,"evolution":{"iterations":9}}"#);
    let out = run_ok(&["search", "--config", s(&cfg), "--print-config", "--iterations", "2"]);
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["seed"], 3);
    assert_eq!(v["evolution"]["iterations"], 2);
    let out = run_ok(&["search", "--config", s(&cfg), "--print-config", "--seed", "8"]);
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["seed"], 8);
    assert_eq!(v["evolution"]["iterations"], 9);
}

#[test]
fn config_errors_exit_with_code_two() {
    let tmp = tempfile::tempdir().unwrap();
    let cases = [
        ("unknown.json", r#"{"version":1,"bogus":true}"#),
        ("noversion.json", r#"{"dataset":{"source":"synthetic"}}"#),
        ("future.json", r#"{"version":99}"#),
        ("syntax.json", r#"{"version":1,"#),
        ("nested.json", r#"{"version":1,"theory":{"widths":[2],"lr":0.1}}"#),
    ];
    for (name, body) in cases {
        let cfg = write_config(tmp.path(), name, body);
        let out = sigeo(&["validate-theory", "--config", s(&cfg), "--out-dir", s(&tmp.path().join("o"))]);
        assert_eq!(out.status.code(), Some(2), "{name}");
        assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"), "{name}");
    }
    let missing = tmp.path().join("nope.json");
    assert_eq!(sigeo(&["validate-theory", "--config", s(&missing)]).status.code(), Some(2));
}

#[test]
fn manifest_from_another_command_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        "t.json",
        &format!(r#"{{"version":1,"dataset":{SMALL_DATA},"theory":{{"widths":[2],"levels":[0.0],"sgd":{{"batch_size":16}}}}}}"#),
    );
    let a = tmp.path().join("a");
    run_ok(&["validate-theory", "--config", s(&cfg), "--out-dir", s(&a)]);
    let raw: Value = serde_json::from_slice(&read(a.join("manifest.json"))).unwrap();
    let mut forged = raw.clone();
    forged["provenance"]["command"] = "search".into();
    let forged_path = write_config(tmp.path(), "forged.json", &forged.to_string());
    let out = sigeo(&["validate-theory", "--config", s(&forged_path)]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_idx_data_exits_with_code_two() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "i.json", r#"{"version":1,"dataset":{"source":"idx"}}"#);
    let out = sigeo(&["validate-theory", "--config", s(&cfg)]);
    assert_eq!(out.status.code(), Some(2));
    let out = sigeo(&["validate-theory", "--config", s(&cfg), "--data-dir", s(&tmp.path().join("absent"))]);
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("train-images-idx3-ubyte"), "{stderr}");
    let out = sigeo(&["validate-theory", "--data-dir", s(tmp.path())]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn corrupt_idx_file_exits_with_code_two() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("data");
    std::fs::create_dir(&dir).unwrap();
    for name in [
        "train-images-idx3-ubyte",
        "train-labels-idx1-ubyte",
        "t10k-images-idx3-ubyte",
        "t10k-labels-idx1-ubyte",
    ] {
        std::fs::write(dir.join(name), [0u8, 0, 8, 3, 0, 0]).unwrap();
    }
    let cfg = write_config(tmp.path(), "i.json", r#"{"version":1,"dataset":{"source":"idx"}}"#);
    let out = sigeo(&["validate-theory", "--config", s(&cfg), "--data-dir", s(&dir)]);
    assert_eq!(out.status.code(), Some(2));
}
