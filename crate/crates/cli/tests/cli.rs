use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use compad::synth::{structural_suite, write_fixture, WrittenFixture};
use compad_cli::{cmd_bench, cmd_detect, Common};
use serde_json::Value;
use tempfile::TempDir;

fn compad(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_compad"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn fixture(refs: usize, normal: usize, anomalous: usize) -> (TempDir, WrittenFixture) {
    let dir = TempDir::new().unwrap();
    let w = write_fixture(&structural_suite(refs, normal, anomalous, 41), dir.path()).unwrap();
    (dir, w)
}

fn write_config(dir: &Path, extra: Value) -> PathBuf {
    let mut cfg = serde_json::json!({
        "detection": {
            "level_tags": ["layer_a", "layer_b"],
            "scorer": {"patch_size": 8},
            "segmenter": {"n_clusters": 3}
        }
    });
    if let (Some(c), Some(e)) = (cfg.as_object_mut(), extra.as_object()) {
        c.extend(e.clone());
    }
    let p = dir.join("config.json");
    std::fs::write(&p, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    p
}

fn queries_glob(dir: &Path) -> String {
    dir.join("queries/*.json").to_string_lossy().into_owned()
}

#[test]
fn validate_accepts_a_valid_fixture() {
    let (dir, w) = fixture(2, 1, 1);
    let o = compad(&["validate", s(&w.bank_manifest), &queries_glob(dir.path())]);
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn validate_names_the_missing_tensor() {
    let (dir, w) = fixture(1, 1, 0);
    let gone = dir.path().join("queries/query_000.cluster.tnsr");
    std::fs::remove_file(&gone).unwrap();
    let o = compad(&["validate", s(&w.query_manifests[0])]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains(s(&gone)), "{}", stderr(&o));
}

#[test]
fn validate_reports_each_bad_manifest_once() {
    let (dir, w) = fixture(1, 3, 1);
    std::fs::remove_file(dir.path().join("queries/query_001.layer_a.tnsr")).unwrap();
    std::fs::write(&w.query_manifests[3], "{ not json").unwrap();
    let missing = dir.path().join("queries/absent.json");
    let o = compad(&["validate", &queries_glob(dir.path()), s(&missing)]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert_eq!(err.matches("FAIL").count(), 3, "{err}");
    assert!(err.contains("query_001.json") && err.contains("query_003.json") && err.contains("absent.json"));
}

#[test]
fn detect_writes_maps_and_summary() {
    let (dir, w) = fixture(2, 2, 1);
    let cfg = write_config(dir.path(), serde_json::json!({}));
    let out = dir.path().join("out");
    let o = compad(&[
        "detect",
        "--config",
        s(&cfg),
        "--bank",
        s(&w.bank_manifest),
        "--out",
        s(&out),
        &queries_glob(dir.path()),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let names: Vec<String> = std::fs::read_dir(&out)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    assert_eq!(names.iter().filter(|n| n.ends_with(".map.png")).count(), 3);
    assert_eq!(names.iter().filter(|n| n.ends_with(".map.tnsr")).count(), 3);
    let summary: Value = serde_json::from_str(&std::fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["queries"].as_array().unwrap().len(), 3);
    assert_eq!(summary["config_fingerprint"].as_str().unwrap().len(), 64);
    assert_eq!(String::from_utf8_lossy(&o.stdout).lines().count(), 3);
}

#[test]
fn shots_keep_the_first_listed_samples() {
    let (dir, w) = fixture(4, 1, 0);
    let cfg = write_config(dir.path(), serde_json::json!({}));
    let common = Common {
        config: Some(cfg),
        out: Some(dir.path().join("out")),
        shots: Some(1),
        ..Common::default()
    };
    let summary = cmd_detect(&common, Some(&w.bank_manifest), &[queries_glob(dir.path())]).unwrap();
    assert_eq!(summary.bank_samples, ["ref_000"]);
    let too_many = Common {
        shots: Some(5),
        ..common
    };
    let err = cmd_detect(&too_many, Some(&w.bank_manifest), &[queries_glob(dir.path())]).unwrap_err();
    assert_eq!(err.exit_code(), 1);
}

#[test]
fn evaluate_reports_and_checks_fingerprints() {
    let (dir, w) = fixture(2, 3, 3);
    let cfg = write_config(dir.path(), serde_json::json!({"dataset": "synthetic"}));
    let run = |out: &Path, seed: &str| {
        let o = compad(&[
            "detect",
            "--config",
            s(&cfg),
            "--bank",
            s(&w.bank_manifest),
            "--out",
            s(out),
            "--seed",
            seed,
            &queries_glob(dir.path()),
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
    };
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    run(&a, "0");
    run(&b, "1");

    let o = compad(&["evaluate", "--config", s(&cfg), "--results", s(&a)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(a.join("report.csv")).unwrap();
    assert!(
        csv.starts_with("dataset,category,image_auc,pixel_auc,n_samples\nsynthetic,all,"),
        "{csv}"
    );
    let report: Value = serde_json::from_str(&std::fs::read_to_string(a.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["overall"]["n_samples"], 6);
    assert!(report["overall"]["pixel_auc"].as_f64().unwrap() > 0.9);

    let o = compad(&["evaluate", "--results", s(&a), "--results", s(&b)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("fingerprint mismatch"), "{}", stderr(&o));

    let o = compad(&["evaluate", "--config", s(&cfg), "--seed", "7", "--results", s(&a)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("fingerprint mismatch"));
}

#[test]
fn evaluate_without_ground_truth_omits_pixel_auc() {
    let (dir, w) = fixture(1, 2, 2);
    for m in &w.query_manifests {
        let mut v: Value = serde_json::from_str(&std::fs::read_to_string(m).unwrap()).unwrap();
        v.as_object_mut().unwrap().remove("gt_mask_path");
        std::fs::write(m, v.to_string()).unwrap();
    }
    let cfg = write_config(dir.path(), serde_json::json!({}));
    let out = dir.path().join("out");
    let o = compad(&[
        "detect",
        "--config",
        s(&cfg),
        "--bank",
        s(&w.bank_manifest),
        "--out",
        s(&out),
        &queries_glob(dir.path()),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = compad(&["evaluate", "--results", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report: Value = serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert!(report["overall"]["pixel_auc"].is_null());
    assert!(report["pixel_auc_absent"].as_str().unwrap().contains("no ground-truth"));
}

#[test]
fn evaluate_without_results_fails() {
    let dir = TempDir::new().unwrap();
    let o = compad(&["evaluate", "--results", s(dir.path())]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("missing results"));
}

#[test]
fn unknown_config_keys_exit_1() {
    let (dir, w) = fixture(1, 1, 0);
    let cfg = write_config(dir.path(), serde_json::json!({"detection": {"sigma": 2}}));
    let o = compad(&[
        "detect",
        "--config",
        s(&cfg),
        "--bank",
        s(&w.bank_manifest),
        "--out",
        s(dir.path()),
        &queries_glob(dir.path()),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("sigma"));
}

#[test]
fn unwritable_output_exits_2() {
    let (dir, w) = fixture(1, 1, 0);
    let cfg = write_config(dir.path(), serde_json::json!({}));
    let blocker = dir.path().join("blocker");
    std::fs::write(&blocker, "file, not a directory").unwrap();
    let o = compad(&[
        "detect",
        "--config",
        s(&cfg),
        "--bank",
        s(&w.bank_manifest),
        "--out",
        s(&blocker),
        &queries_glob(dir.path()),
    ]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn bad_flags_exit_1() {
    assert_eq!(compad(&["detect", "--threads", "many"]).status.code(), Some(1));
    assert_eq!(compad(&["--help"]).status.code(), Some(0));
}

#[test]
fn segment_writes_component_stacks() {
    let (dir, w) = fixture(2, 2, 0);
    let cfg = write_config(dir.path(), serde_json::json!({}));
    let out = dir.path().join("seg");
    let o = compad(&[
        "segment",
        "--config",
        s(&cfg),
        "--bank",
        s(&w.bank_manifest),
        "--out",
        s(&out),
        &queries_glob(dir.path()),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let entries: Value = serde_json::from_str(&std::fs::read_to_string(out.join("segments.json")).unwrap()).unwrap();
    assert_eq!(entries.as_array().unwrap().len(), 2);
    assert_eq!(entries[0]["branch"], "fused");
    let t = compad::read_tensor(out.join("query_000.components.tnsr")).unwrap();
    assert_eq!(t.dims(), &[2, 128, 128]);
}

#[test]
fn bench_reports_every_stage() {
    let (dir, w) = fixture(2, 2, 1);
    let cfg = write_config(dir.path(), serde_json::json!({}));
    let common = Common {
        config: Some(cfg),
        threads: Some(1),
        ..Common::default()
    };
    let q = [queries_glob(dir.path())];
    let a = cmd_bench(&common, Some(&w.bank_manifest), &q, 1).unwrap();
    let b = cmd_bench(&common, Some(&w.bank_manifest), &q, 1).unwrap();
    for r in [&a, &b] {
        assert!(r.segment >= 0.0 && r.capm.total >= 0.0 && r.gecm >= 0.0 && r.fusion >= 0.0);
    }
    assert_eq!(
        a.capm.levels.keys().collect::<Vec<_>>(),
        b.capm.levels.keys().collect::<Vec<_>>()
    );
    assert_eq!(a.capm.levels.len(), 2);

    let o = compad(&[
        "bench",
        "--config",
        s(&common.config.unwrap()),
        "--bank",
        s(&w.bank_manifest),
        &q[0],
    ]);
    let v: Value = serde_json::from_slice(&o.stdout).unwrap();
    for k in ["segment", "capm", "gecm", "fusion"] {
        assert!(v.get(k).is_some(), "{k}");
    }
}

#[test]
fn more_threads_do_not_slow_a_64_query_run() {
    let (dir, w) = fixture(1, 64, 0);
    let cfg = write_config(dir.path(), serde_json::json!({}));
    let q = [queries_glob(dir.path())];
    let time = |threads| {
        let c = Common {
            config: Some(cfg.clone()),
            threads: Some(threads),
            ..Common::default()
        };
        cmd_bench(&c, Some(&w.bank_manifest), &q, 1).unwrap().wall
    };
    let one = time(1);
    let four = time(4);
    // small tolerance for scheduler noise on loaded machines
    assert!(four <= one * 1.10, "1 thread {one:.3}s, 4 threads {four:.3}s");
}

#[test]
fn synth_writes_a_runnable_config() {
    let dir = TempDir::new().unwrap();
    let o = compad(&[
        "synth",
        "--kind",
        "logical",
        "--refs",
        "2",
        "--normal",
        "2",
        "--anomalous",
        "2",
        "--out",
        s(dir.path()),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let cfg = dir.path().join("config.json");
    let out = dir.path().join("out");
    let o = compad(&["detect", "--config", s(&cfg), "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = compad(&["evaluate", "--config", s(&cfg), "--results", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
}
