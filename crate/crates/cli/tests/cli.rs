use std::path::Path;
use std::process::{Command, Output};

fn gwwalk(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gwwalk")).args(args).output().unwrap()
}

fn write_config(dir: &Path, name: &str, body: &str) -> String {
    let path = dir.join(name);
    std::fs::write(&path, body).unwrap();
    path.to_str().unwrap().to_string()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn regimes_table_for_the_reference_law() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = gwwalk(&["regimes", "--beta", "0.5,1,1.8", "--out", out]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let csv = std::fs::read_to_string(dir.path().join("regimes.csv")).unwrap();
    let rows: Vec<Vec<&str>> = csv.lines().skip(1).map(|l| l.split(',').collect()).collect();
    let labels: Vec<&str> = rows.iter().map(|r| r[1]).collect();
    assert_eq!(labels, ["recurrent", "ballistic_clt", "ballistic_no_clt"]);
    let th: Vec<f64> = rows[0][2..5].iter().map(|x| x.parse().unwrap()).collect();
    assert!((th[0] - 2.0 / 3.0).abs() < 1e-12);
    assert!((th[1] - 2f64.sqrt()).abs() < 1e-12);
    assert!((th[2] - 2.0).abs() < 1e-12);

    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("regimes.json")).unwrap()).unwrap();
    assert_eq!(json["config"]["betas"], serde_json::json!([0.5, 1.0, 1.8]));
    assert!(json["git_describe"].is_string());
    assert!(json["wall_clock_seconds"].is_number());
}

#[test]
fn unnormalized_law_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "bad.json", r#"{ "law": [[0, 0.2], [2, 0.7]] }"#);
    let o = gwwalk(&["regimes", "--config", &cfg, "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("normalization"), "{}", stderr(&o));
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(gwwalk(&["no-such-experiment"]).status.code(), Some(1));
    assert_eq!(gwwalk(&["speed", "--seed", "not-a-number"]).status.code(), Some(1));
    assert_eq!(gwwalk(&["--help"]).status.code(), Some(0));

    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "other.json", r#"{ "experiment": "speed" }"#);
    assert_eq!(gwwalk(&["regimes", "--config", &cfg]).status.code(), Some(1));
    let cfg = write_config(dir.path(), "sub.json", r#"{ "law": [[0, "1/2"], [1, "1/2"]] }"#);
    let o = gwwalk(&["regimes", "--config", &cfg, "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("supercritical"), "{}", stderr(&o));
}

#[test]
fn infeasible_oracle_depth_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "deep.json", r#"{ "params": { "depth": 7 } }"#);
    let o = gwwalk(&["oracle-compare", "--config", &cfg, "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("depth"), "{}", stderr(&o));
}

const SMALL_ORACLE: &str = r#"{
  "law": [[0, "1/4"], [2, "3/4"]],
  "params": {
    "shape_samples": 3000,
    "kernel_walks": 2000,
    "kernel_min_visits": 1000,
    "height_samples": 20000,
    "height_range": [1, 6],
    "excursion_samples": 3000
  }
}"#;

#[test]
fn csv_output_is_identical_across_reruns_and_thread_counts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "small.json", SMALL_ORACLE);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for (out, threads) in [(&a, "1"), (&b, "3")] {
        let o = gwwalk(&["oracle-compare", "--config", &cfg, "--out", out.to_str().unwrap(), "--threads", threads]);
        assert!(matches!(o.status.code(), Some(0 | 2)), "{}", stderr(&o));
    }
    let mut names: Vec<_> = std::fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    let csvs: Vec<_> = names.iter().filter(|n| n.to_string_lossy().ends_with(".csv")).collect();
    assert_eq!(csvs.len(), 4);
    for name in csvs {
        assert_eq!(std::fs::read(a.join(name)).unwrap(), std::fs::read(b.join(name)).unwrap(), "{name:?}");
    }
}

#[test]
fn failed_verdict_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    // no state class can reach the visit threshold, so the kernel check cannot pass
    let cfg = write_config(
        dir.path(),
        "strict.json",
        r#"{ "params": { "shape_samples": 2000, "kernel_walks": 100, "kernel_min_visits": 1000000,
             "height_samples": 20000, "height_range": [1, 6], "excursion_samples": 1000 } }"#,
    );
    let o = gwwalk(&["oracle-compare", "--config", &cfg, "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("FAIL kernel"));
}

#[test]
fn annealed_clt_reports_a_passing_ks_test() {
    let dir = tempfile::tempdir().unwrap();
    let o = gwwalk(&["annealed-clt", "--beta", "1", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("annealed-clt.json")).unwrap()).unwrap();
    let sample = &json["results"]["runs"][0]["samples"][0];
    assert!(sample["ks"]["p_value"].as_f64().unwrap() > 0.01);
    assert_eq!(sample["ks"]["pass"], true);
    assert_eq!(json["pass"], true);
}

#[test]
fn tree_dump_prints_the_text_format() {
    let o = gwwalk(&["tree-dump", "--depth", "2", "--index", "3"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = String::from_utf8(o.stdout).unwrap();
    let first: Vec<&str> = text.lines().next().unwrap().split('\t').collect();
    assert_eq!(first, ["·", "2", "1"]);
    assert!(text.lines().any(|l| l.starts_with("0\t") || l.starts_with("1\t")));
    assert_eq!(gwwalk(&["tree-dump", "--depth", "2", "--index", "3"]).stdout, text.into_bytes());
}
