use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const CONFIG: &str = "# tiny run
epochs = 3
ramp_t = 2
batch_size = 20
lr = 3e-3
k_p = 4
k_n = 16
hidden = 16
feature_dim = 8
proj_dim = 4
classes = 3
blob_counts = 60,30,10
blob_dim = 6
holdout = 20
";

fn crckd(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_crckd"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn text(o: &Output) -> String {
    format!(
        "{}{}",
        String::from_utf8_lossy(&o.stdout),
        String::from_utf8_lossy(&o.stderr)
    )
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("exp.cfg"), CONFIG).unwrap();
    dir
}

#[test]
fn train_then_eval_and_export() {
    let dir = setup();
    let o = crckd(&["train", "--config", "exp.cfg", "--method", "full", "--out", "run"], dir.path());
    assert!(o.status.success(), "{}", text(&o));
    let run = dir.path().join("run");
    let log = fs::read_to_string(run.join("metrics.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 3);
    for line in log.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v["eval"]["bma"].is_number());
        assert!(v["eval"]["r_d"].is_number());
        assert!(v["lambda1"].is_number());
    }
    assert!(run.join("checkpoint.bin").is_file());
    assert!(run.join("relation.csv").is_file());

    let o = crckd(&["eval", "--checkpoint", "run/checkpoint.bin"], dir.path());
    assert!(o.status.success(), "{}", text(&o));
    assert!(text(&o).contains("BMA="));

    let o = crckd(&["--mode", "export", "--checkpoint", "run/checkpoint.bin", "--out", "exp"], dir.path());
    assert!(o.status.success(), "{}", text(&o));
    let rel = fs::read_to_string(dir.path().join("exp/relation.csv")).unwrap();
    assert!(rel.lines().count() > 20);
}

#[test]
fn resuming_continues_the_log() {
    let dir = setup();
    let o = crckd(&["train", "--config", "exp.cfg", "--epochs", "2", "--out", "a"], dir.path());
    assert!(o.status.success(), "{}", text(&o));
    let o = crckd(&["train", "--checkpoint", "a/checkpoint.bin", "--out", "a"], dir.path());
    assert!(o.status.success(), "{}", text(&o));
    let o = crckd(&["train", "--config", "exp.cfg", "--out", "b"], dir.path());
    assert!(o.status.success(), "{}", text(&o));
    // the resumed run was trained with epochs = 2 as its embedded config
    let a = fs::read_to_string(dir.path().join("a/metrics.jsonl")).unwrap();
    let b = fs::read_to_string(dir.path().join("b/metrics.jsonl")).unwrap();
    assert_eq!(a.lines().count(), 2);
    assert_eq!(b.lines().count(), 3);
}

#[test]
fn ablation_writes_summary() {
    let dir = setup();
    let o = crckd(
        &["ablation", "--config", "exp.cfg", "--seeds", "2", "--method", "b1,full", "--out", "abl"],
        dir.path(),
    );
    assert!(o.status.success(), "{}", text(&o));
    let csv = fs::read_to_string(dir.path().join("abl/summary.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "method,ACC,AP,BMA,F1,R_d");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("B1,"));
    assert_eq!(lines[2].split(',').count(), 6);
    assert!(lines[2].contains('±'));
    assert!(dir.path().join("abl/full/seed1/result.json").is_file());
}

#[test]
fn selftest_passes_and_detects_faults() {
    let dir = setup();
    let o = crckd(&["selftest", "--instances", "5"], dir.path());
    assert!(o.status.success(), "{}", text(&o));
    assert!(text(&o).contains("0 failed"));

    let o = crckd(&["selftest", "--instances", "5", "--inject-fault", "matmul"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    let out = text(&o);
    assert!(out.contains("FAIL grad:matmul"), "{out}");
    assert!(out.contains("1 failed"), "{out}");
}

#[test]
fn bad_input_is_reported() {
    let dir = setup();
    fs::write(dir.path().join("bad.cfg"), "epochs = 2\nlearning_rate = 0.1\n").unwrap();
    let o = crckd(&["train", "--config", "bad.cfg"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(text(&o).contains("learning_rate"), "{}", text(&o));

    let o = crckd(&["train", "--config", "missing.cfg"], dir.path());
    assert_eq!(o.status.code(), Some(1));

    let o = crckd(&["eval"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(text(&o).contains("--checkpoint"));

    let o = crckd(&["frobnicate"], dir.path());
    assert_eq!(o.status.code(), Some(2));

    let o = crckd(&["ablation", "--config", "exp.cfg", "--method", "b9"], dir.path());
    assert_eq!(o.status.code(), Some(1));
}
