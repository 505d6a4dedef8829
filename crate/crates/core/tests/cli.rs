use std::path::Path;
use std::process::{Command, Output};

fn crmatch(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_crmatch"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(code(&crmatch(&["frobnicate"])), 2);
    assert_eq!(code(&crmatch(&["train", "--no-such-flag"])), 2);
    let o = crmatch(&["train", "--set", "no_such_key=1"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("no_such_key"));
    assert_eq!(code(&crmatch(&["train", "--set", "tau"])), 2);
    assert_eq!(code(&crmatch(&[])), 2);
}

#[test]
fn runtime_failures_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing");
    assert_eq!(code(&crmatch(&["eval", "--run", missing.to_str().unwrap()])), 1);
    let bad = dir.path().join("bad.conf");
    std::fs::write(&bad, "dataset = cifar\ndata_path = /definitely/not/here\n").unwrap();
    assert_eq!(code(&crmatch(&["train", "--config", bad.to_str().unwrap()])), 1);
}

#[test]
fn grad_check_reports_every_op() {
    let o = crmatch(&["grad-check"]);
    assert_eq!(code(&o), 0);
    let out = stdout(&o);
    for op in crmatch::tensor::OpKind::all() {
        assert!(out.lines().any(|l| l.split_whitespace().next() == Some(op.name())), "{op} missing");
    }
    assert!(out.lines().all(|l| l.ends_with("ok")));
}

fn is_p6(path: &Path) -> bool {
    let bytes = std::fs::read(path).unwrap();
    bytes.starts_with(b"P6\n32 32\n255\n") && bytes.len() == 13 + 32 * 32 * 3
}

#[test]
fn augment_preview_writes_sixty_ppms() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("preview");
    let o = crmatch(&["augment-preview", "--seed", "7", "--n", "60", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let mut files: Vec<_> = std::fs::read_dir(&out).unwrap().map(|e| e.unwrap().path()).collect();
    files.sort();
    assert_eq!(files.len(), 60);
    assert!(files.iter().all(|f| is_p6(f)));

    // same seed, same bytes
    let again = dir.path().join("again");
    crmatch(&["augment-preview", "--seed", "7", "--n", "3", "--out", again.to_str().unwrap()]);
    for name in ["strong_0000.ppm", "strong_0002.ppm"] {
        assert_eq!(std::fs::read(out.join(name)).unwrap(), std::fs::read(again.join(name)).unwrap());
    }
}

#[test]
fn make_splits_lists_five_labeled_sets() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("splits.csv");
    let o = crmatch(&["make-splits", "--desk", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    let text = std::fs::read_to_string(&out).unwrap();
    let rows: Vec<&str> = text.lines().skip(1).collect();
    assert_eq!(rows.len(), 5);
    for r in rows {
        let (_, idx) = r.split_once(',').unwrap();
        assert_eq!(idx.split(' ').count(), 16);
    }
}

#[test]
fn train_then_analyze_a_short_run() {
    let dir = tempfile::tempdir().unwrap();
    let run_dir = dir.path().join("run");
    let run = run_dir.to_str().unwrap();
    let o = crmatch(&[
        "train", "--desk", "--set", "total_steps=6", "--set", "log_every=2", "--set", "eval_every=3",
        "--set", "dist_metric=none", "--out", run,
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(run_dir.join("metrics.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], crmatch::trainer::METRICS_HEADER);
    // steps 2 and 4 (log), 3 and 6 (eval)
    assert_eq!(lines.len(), 1 + 4);
    // loss_dist is empty with the distance term off
    assert!(lines[1..].iter().all(|l| l.split(',').nth(5) == Some("")));
    let resolved = std::fs::read_to_string(run_dir.join("config.resolved")).unwrap();
    assert!(resolved.contains("dist_metric = none"));

    // rerunning from the echoed config reproduces the metrics
    let rerun = dir.path().join("rerun");
    let o = crmatch(&[
        "train", "--config", run_dir.join("config.resolved").to_str().unwrap(), "--out", rerun.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0);
    assert_eq!(std::fs::read_to_string(rerun.join("metrics.csv")).unwrap(), csv);

    let o = crmatch(&["eval", "--run", run]);
    assert_eq!(code(&o), 0);
    let err: f64 = stdout(&o).trim().parse().unwrap();
    assert!((0.0..=1.0).contains(&err));

    let probe_csv = dir.path().join("probe.csv");
    let o = crmatch(&[
        "probe", "--run", run, "--transform", "rotation", "--n", "200", "--append", probe_csv.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let probe = std::fs::read_to_string(&probe_csv).unwrap();
    assert!(probe.starts_with("model_tag,transform,probe_error\nmodel,rotation,"));
    assert_eq!(code(&crmatch(&["probe", "--run", run, "--transform", "warp"])), 2);

    let o = crmatch(&["feature-stats", "--run", run, "--n", "50"]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("strong-orig"));

    let feats = dir.path().join("test.feat");
    assert_eq!(code(&crmatch(&["export-features", "--run", run, "--out", feats.to_str().unwrap()])), 0);
    let (dim, f, labels) = crmatch::probe::read_features(&feats).unwrap();
    assert_eq!(dim, 32);
    assert_eq!(labels.len(), 1000);
    assert_eq!(f.len(), 1000 * 32);
}
