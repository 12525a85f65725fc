use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_oodkit");

fn oodkit(dir: &Path, args: &[&str]) -> Output {
    Command::new(BIN).current_dir(dir).args(args).output().unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = oodkit(dir, args);
    assert!(
        out.status.success(),
        "oodkit {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn fails(dir: &Path, args: &[&str], code: i32) -> String {
    let out = oodkit(dir, args);
    assert_eq!(
        out.status.code(),
        Some(code),
        "oodkit {args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stderr).unwrap()
}

fn script() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scripts/pipeline.sh")
}

fn files_with_ext(dir: &Path, ext: &str) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.extension().is_some_and(|x| x == ext) {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.push((rel, std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

const SMALL: &str = r#"
seed = 4
input_size = 16

[model]
conv_channels = [2, 4, 4]
hidden = 8
head_channels = 4
exit_after = [1, 2]

[train]
epochs = 3
batch_size = 4
"#;

fn small_setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("run.toml"), SMALL).unwrap();
    ok(
        dir.path(),
        &[
            "--config",
            "run.toml",
            "synth",
            "--out",
            "data",
            "--train",
            "4",
            "--calibrate",
            "7",
            "--test",
            "3",
        ],
    );
    dir
}

#[test]
fn pipeline_script_is_byte_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [&a, &b] {
        let out = Command::new("bash")
            .arg(script())
            .arg(d.path())
            .arg(BIN)
            .output()
            .unwrap();
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let csv_a = files_with_ext(a.path(), "csv");
    assert!(csv_a.len() > 20, "only {} CSV files", csv_a.len());
    assert!(csv_a.iter().any(|(n, _)| n == "eval/metrics.csv"));
    assert!(csv_a.iter().any(|(n, _)| n == "eval/exits.csv"));
    assert!(csv_a.iter().any(|(n, _)| n == "eval/classification.csv"));
    assert_eq!(csv_a, files_with_ext(b.path(), "csv"));
    assert_eq!(files_with_ext(a.path(), "lock"), files_with_ext(b.path(), "lock"));
    assert_eq!(files_with_ext(a.path(), "bin"), files_with_ext(b.path(), "bin"));
}

#[test]
fn same_config_same_run_lock() {
    let dir = small_setup();
    ok(
        dir.path(),
        &["--config", "run.toml", "train", "--data", "data", "--out", "m1"],
    );
    ok(
        dir.path(),
        &["--config", "run.toml", "train", "--data", "data", "--out", "m2"],
    );
    let l1 = std::fs::read_to_string(dir.path().join("m1/run.lock")).unwrap();
    let l2 = std::fs::read_to_string(dir.path().join("m2/run.lock")).unwrap();
    assert_eq!(l1, l2);
    assert!(l1.contains("checkpoint = \""));
    ok(
        dir.path(),
        &[
            "--config", "run.toml", "--seed", "5", "train", "--data", "data", "--out", "m3",
        ],
    );
    let l3 = std::fs::read_to_string(dir.path().join("m3/run.lock")).unwrap();
    assert_ne!(l1, l3);
}

#[test]
fn missing_manifest_exits_2_with_path() {
    let dir = tempfile::tempdir().unwrap();
    let err = fails(
        dir.path(),
        &["train", "--data", "nowhere/manifest.csv", "--out", "m"],
        2,
    );
    assert!(err.contains("nowhere/manifest.csv"), "{err}");
    let err = fails(dir.path(), &["train", "--out", "m"], 2);
    assert!(err.contains("--data"), "{err}");
    fails(dir.path(), &["frobnicate"], 2);
    fails(dir.path(), &["--quantile", "1.5", "report", "--eval", "x"], 2);
    fails(dir.path(), &["--method", "bayes", "report", "--eval", "x"], 2);
}

fn write_scores(dir: &Path, name: &str, method: &str, origin: &str, scores: &[f64], fingerprint: &str) {
    let mut csv = String::from("sample_id,method,exit1,exit2,exit3,combined,origin\n");
    for (i, s) in scores.iter().enumerate() {
        csv.push_str(&format!("{name}_{i},{method},,,,{s},{origin}\n"));
    }
    std::fs::write(dir.join(name), csv).unwrap();
    std::fs::write(
        dir.join(format!("{name}.meta")),
        format!("method = \"{method}\"\nmodel_fingerprint = \"{fingerprint}\"\ntemperature = 0.001\n"),
    )
    .unwrap();
}

#[test]
fn perfectly_separated_files_evaluate_to_full_auc() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let id: Vec<f64> = (0..20).map(|i| 0.9 + f64::from(i) * 0.001).collect();
    write_scores(d, "id.csv", "softmax", "ID", &id, "m");
    write_scores(d, "ood.csv", "softmax", "OOD", &[0.1, 0.2, 0.3], "m");
    ok(
        d,
        &["evaluate", "--id", "id.csv", "--ood", "far=ood.csv", "--out", "eval"],
    );
    let metrics = std::fs::read_to_string(d.join("eval/metrics.csv")).unwrap();
    assert_eq!(metrics, "method,ood_set,auc_pct,fpr95_pct\nsoftmax,far,100.0,0.0\n");
    assert!(d.join("eval/roc_softmax_far.csv").is_file());
}

#[test]
fn report_lists_every_method_and_set() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let id: Vec<f64> = (0..20).map(f64::from).collect();
    let mut args = vec!["evaluate".to_string()];
    for (method, fp) in [("softmax", "m"), ("ensemble", "e")] {
        write_scores(d, &format!("{method}_id.csv"), method, "ID", &id, fp);
        args.extend(["--id".into(), format!("{method}_id.csv")]);
        for (k, set) in ["uniform", "digits", "corrupt"].iter().enumerate() {
            let ood: Vec<f64> = (0..10).map(|i| f64::from(i) * (k as f64 + 1.0)).collect();
            let name = format!("{method}_{set}.csv");
            write_scores(d, &name, method, "OOD", &ood, fp);
            args.extend(["--ood".into(), format!("{set}={name}")]);
        }
    }
    args.extend(["--out".into(), "eval".into()]);
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    ok(d, &refs);
    let report = ok(d, &["report", "--eval", "eval"]);
    let table: Vec<&str> = report
        .split("## Per-exit")
        .next()
        .unwrap()
        .lines()
        .filter(|l| l.starts_with("| softmax") || l.starts_with("| ensemble"))
        .collect();
    assert_eq!(table.len(), 6, "{report}");
    assert!(table[0].starts_with("| softmax | uniform |"));
    assert!(table[5].starts_with("| ensemble | corrupt |"));
    assert_eq!(std::fs::read_dir(d.join("eval")).unwrap().count(), 3 + 6);
}

#[test]
fn mismatched_fingerprints_are_refused() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let id: Vec<f64> = (0..20).map(f64::from).collect();
    write_scores(d, "id.csv", "softmax", "ID", &id, "model-a");
    write_scores(d, "ood.csv", "softmax", "OOD", &[1.0], "model-b");
    let err = fails(
        d,
        &["evaluate", "--id", "id.csv", "--ood", "x=ood.csv", "--out", "eval"],
        2,
    );
    assert!(err.contains("different models"), "{err}");

    ok(d, &["calibrate", "--scores", "id.csv", "--out", "t.toml"]);
    write_scores(d, "other_id.csv", "softmax", "ID", &id, "model-b");
    let err = fails(
        d,
        &[
            "evaluate",
            "--id",
            "other_id.csv",
            "--thresholds",
            "t.toml",
            "--out",
            "eval",
        ],
        2,
    );
    assert!(err.contains("model-a"), "{err}");

    write_scores(d, "ens_id.csv", "ensemble", "ID", &id, "model-a");
    let t = std::fs::read_to_string(d.join("t.toml")).unwrap();
    std::fs::write(
        d.join("t2.toml"),
        t.replace("softmax", "ensemble").replace("model-a", "model-x"),
    )
    .unwrap();
    let err = fails(
        d,
        &[
            "evaluate",
            "--id",
            "ens_id.csv",
            "--thresholds",
            "t2.toml",
            "--out",
            "eval",
        ],
        2,
    );
    assert!(err.contains("refusing"), "{err}");
}

#[test]
fn thresholds_from_another_method_are_refused_at_scoring() {
    let dir = small_setup();
    let d = dir.path();
    ok(d, &["--config", "run.toml", "train", "--data", "data", "--out", "m"]);
    ok(
        d,
        &[
            "--config",
            "run.toml",
            "score",
            "--model",
            "m",
            "--data",
            "data",
            "--split",
            "calibrate",
            "--out",
            "cal.csv",
        ],
    );
    ok(
        d,
        &[
            "--config",
            "run.toml",
            "calibrate",
            "--scores",
            "cal.csv",
            "--out",
            "t.toml",
        ],
    );
    let err = fails(
        d,
        &[
            "--config",
            "run.toml",
            "--method",
            "softmax",
            "score",
            "--model",
            "m",
            "--data",
            "data",
            "--out",
            "s.csv",
            "--thresholds",
            "t.toml",
        ],
        2,
    );
    assert!(err.contains("calibrated for method energy"), "{err}");
    let err = fails(
        d,
        &[
            "--config", "run.toml", "--method", "ensemble", "score", "--model", "m", "--data", "data", "--out", "s.csv",
        ],
        2,
    );
    assert!(err.contains("ensemble directory"), "{err}");
}

#[test]
fn calibration_needs_twenty_scores() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let id: Vec<f64> = (0..19).map(f64::from).collect();
    write_scores(d, "id.csv", "softmax", "ID", &id, "m");
    let err = fails(d, &["calibrate", "--scores", "id.csv", "--out", "t.toml"], 2);
    assert!(err.contains("20"), "{err}");
}

#[test]
fn busy_output_directory_is_refused() {
    let dir = small_setup();
    let d = dir.path();
    std::fs::create_dir_all(d.join("m")).unwrap();
    std::fs::write(d.join("m/.oodkit.lock"), "").unwrap();
    let err = fails(d, &["--config", "run.toml", "train", "--data", "data", "--out", "m"], 2);
    assert!(err.contains("in use"), "{err}");
}

#[test]
fn corrupt_writes_pngs_and_manifest() {
    let dir = small_setup();
    let d = dir.path();
    ok(
        d,
        &[
            "--config", "run.toml", "corrupt", "--data", "data", "--split", "test", "--out", "c1",
        ],
    );
    ok(
        d,
        &[
            "--config",
            "run.toml",
            "corrupt",
            "--data",
            "data/manifest.csv",
            "--split",
            "test",
            "--out",
            "c2",
        ],
    );
    let manifest = std::fs::read_to_string(d.join("c1/manifest.csv")).unwrap();
    assert_eq!(manifest.lines().count(), 1 + 9);
    assert!(manifest.lines().skip(1).all(|l| l.ends_with(",test")));
    assert_eq!(
        files_with_ext(&d.join("c1"), "png"),
        files_with_ext(&d.join("c2"), "png")
    );
    assert_ne!(
        files_with_ext(&d.join("c1"), "png"),
        files_with_ext(&d.join("data/test"), "png")
    );
}
