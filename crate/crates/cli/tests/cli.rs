use std::collections::BTreeMap;
use std::path::Path;
use std::process::{Command, Output};

use relbev_cli::bundle::{load_scene, write_bundle};
use relbev_cli::pgm;
use relbev_core::metrics::MetricReport;

fn relbev(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_relbev")).args(args).env_remove("RBEV_THREADS").output().expect("spawn relbev")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// File name to contents, skipping the metadata sidecar.
fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|f| f.file_name().unwrap() != "meta.json")
        .map(|f| (f.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&f).unwrap()))
        .collect()
}

#[test]
fn help_lists_all_commands() {
    let out = relbev(&["--help"]);
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    for c in ["simulate", "encode", "evaluate", "gradcheck", "train-toy", "weights-dump"] {
        assert!(text.contains(c), "{c} missing from help");
    }
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(relbev(&["simulate", "--bogus"]).status.code(), Some(2));
    assert_eq!(relbev(&["frobnicate"]).status.code(), Some(2));
    let out = relbev(&["encode", "--bundle", "/definitely/not/here"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("/definitely/not/here"));
    let out = relbev(&["simulate", "--config", "/no/such/config.json"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("/no/such/config.json"));
}

#[test]
fn malformed_config_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.json");
    std::fs::write(&cfg, r#"{"seed": 1, "sede": 2}"#).unwrap();
    let out = relbev(&["simulate", "--config", p(&cfg), "--out", p(&tmp.path().join("o"))]);
    assert_eq!(out.status.code(), Some(2));
    std::fs::write(&cfg, "{ not json").unwrap();
    assert_eq!(relbev(&["simulate", "--config", p(&cfg)]).status.code(), Some(2));
}

#[test]
fn bad_thread_count_exits_2() {
    let out = Command::new(env!("CARGO_BIN_EXE_relbev")).args(["gradcheck"]).env("RBEV_THREADS", "zero").output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn simulate_is_byte_identical_and_reloads() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for d in [&a, &b] {
        let out = relbev(&["simulate", "--seed", "11", "--out", p(d)]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let snap = snapshot(&a);
    assert!(snap == snapshot(&b), "same seed wrote different bundles");
    for f in ["scene.json", "cam0.rbt", "cam1.pgm", "gt_map.pgm", "gt_object.pgm"] {
        assert!(snap.contains_key(f), "{f} missing");
    }
    let meta: serde_json::Value = serde_json::from_slice(&std::fs::read(a.join("meta.json")).unwrap()).unwrap();
    assert_eq!(meta["seed"], 11);

    // parse, rewrite, compare
    let scene = load_scene(&a).unwrap();
    assert_eq!(scene.config.seed, 11);
    let c = tmp.path().join("c");
    write_bundle(&c, &scene).unwrap();
    assert_eq!(load_scene(&c).unwrap(), scene);
    let sc = snapshot(&c);
    let sa = snap.clone();
    assert!(sa == sc, "rewritten bundle differs");

    let (w, h, px) = pgm::decode(&snap["gt_map.pgm"]).unwrap();
    assert_eq!((w, h), (20, 20));
    assert!(px.iter().any(|&v| v > 0));

    let other = tmp.path().join("d");
    assert!(relbev(&["simulate", "--seed", "12", "--out", p(&other)]).status.success());
    assert_ne!(snapshot(&other)["scene.json"], snap["scene.json"]);
}

#[test]
fn simulate_encode_evaluate_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let (b, e, m, w) = (tmp.path().join("b"), tmp.path().join("e"), tmp.path().join("m"), tmp.path().join("w"));
    assert!(relbev(&["simulate", "--seed", "4", "--out", p(&b)]).status.success());
    let out = relbev(&["encode", "--bundle", p(&b), "--out", p(&e), "--corrupt", "auto"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["bev.rbt", "fusion.rbt", "detections.json", "corruption.json"] {
        assert!(e.join(f).exists(), "{f} missing");
    }
    let out = relbev(&["evaluate", "--detections", p(&e.join("detections.json")), "--gt", p(&b), "--out", p(&m)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    // schema: every field present, finite and in range
    let report: MetricReport = serde_json::from_slice(&std::fs::read(m.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(report.thresholds, vec![0.5, 1.0, 2.0, 4.0]);
    for v in [report.map, report.nds] {
        assert!((0.0..=1.0).contains(&v));
    }
    assert!((report.recomputed_nds() - report.nds).abs() < 1e-12);
    for c in report.per_class.values() {
        assert_eq!(c.ap.len(), 4);
    }
    let csv = std::fs::read_to_string(m.join("metrics.csv")).unwrap();
    let header = csv.lines().next().unwrap();
    assert!(header.starts_with("class,AP@0.5") && header.ends_with(",NDS"));
    assert!(csv.lines().last().unwrap().starts_with("all,"));

    let out = relbev(&["weights-dump", "--bundle", p(&b), "--out", p(&w)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let side: serde_json::Value = serde_json::from_slice(&std::fs::read(w.join("omega.json")).unwrap()).unwrap();
    assert_eq!(side["cameras"].as_array().unwrap().len(), 2);
    let (cw, ch, _) = pgm::decode(&std::fs::read(w.join("omega_cam0.pgm")).unwrap()).unwrap();
    assert_eq!((cw, ch), (20, 20));

    // repeated runs write the same primary outputs
    let e2 = tmp.path().join("e2");
    assert!(relbev(&["encode", "--bundle", p(&b), "--out", p(&e2), "--corrupt", "auto"]).status.success());
    assert!(snapshot(&e) == snapshot(&e2), "repeated encode differs");
}

#[test]
fn mismatched_ground_truth_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b, e) = (tmp.path().join("a"), tmp.path().join("b"), tmp.path().join("e"));
    assert!(relbev(&["simulate", "--seed", "1", "--out", p(&a)]).status.success());
    assert!(relbev(&["simulate", "--seed", "2", "--out", p(&b)]).status.success());
    assert!(relbev(&["encode", "--bundle", p(&a), "--out", p(&e)]).status.success());
    let out = relbev(&["evaluate", "--detections", p(&e.join("detections.json")), "--gt", p(&b)]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn train_toy_writes_curve_and_reusable_weights() {
    let tmp = tempfile::tempdir().unwrap();
    let (t, b, e) = (tmp.path().join("t"), tmp.path().join("b"), tmp.path().join("e"));
    let out = relbev(&["train-toy", "--steps", "5", "--seed", "2", "--out", p(&t)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let curve = std::fs::read_to_string(t.join("loss_curve.csv")).unwrap();
    assert_eq!(curve.lines().count(), 6);
    assert!(curve.starts_with("step,total,cls,reg,seg_map,seg_obj\n"));
    assert!(relbev(&["simulate", "--seed", "2", "--out", p(&b)]).status.success());
    let out = relbev(&["encode", "--bundle", p(&b), "--weights", p(&t.join("weights.rbp")), "--out", p(&e)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn gradcheck_passes_and_reports_every_tensor() {
    let tmp = tempfile::tempdir().unwrap();
    let out = relbev(&["gradcheck", "--max-elems", "2", "--out", p(tmp.path())]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(tmp.path().join("gradcheck.csv")).unwrap();
    assert!(csv.lines().skip(1).all(|l| l.ends_with(",true")));
    assert!(csv.lines().count() > 50);
}
