use std::path::Path;
use std::process::{Command, Output};

const CONFIG: &str = r#"{
  "corpus": { "train_sequences": 4, "test_sequences": 2, "frames": 30, "bank_size": 50 },
  "train": { "sequence_length": 15, "batch_size": 4, "epochs": 4, "c": 6, "c_prime": 6, "learning_rate": 0.02 }
}"#;

fn blapose(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_blapose"))
        .current_dir(dir)
        .args(args)
        .output()
        .unwrap()
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("config.json"), CONFIG).unwrap();
    let out = blapose(dir.path(), &["--config", "config.json", "gen-corpus", "--out", "corpus"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    dir
}

#[test]
fn evaluating_the_truth_scores_zero() {
    let dir = setup();
    let out = blapose(
        dir.path(),
        &["--json", "eval", "--corpus", "corpus", "--pred", "corpus/test.bundle", "--out-dir", "eval"],
    );
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("eval/report.json")).unwrap()).unwrap();
    let overall = &report["overall"];
    for key in ["mpjpe_mm", "p_mpjpe_mm", "bone_len_err_mm"] {
        assert!(overall[key].as_f64().unwrap() < 1e-6, "{key}: {}", overall[key]);
    }
    for name in ["report.csv", "report.md"] {
        assert!(dir.path().join("eval").join(name).exists());
    }
    let summary: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(summary.is_object());
}

#[test]
fn unknown_flag_is_a_validation_error_and_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let out = blapose(dir.path(), &["gen-corpus", "--out", "corpus", "--frobnicate"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!out.stderr.is_empty());
    assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 0);
}

#[test]
fn invalid_config_value_exits_with_one() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.json"), r#"{ "augmentation": { "uniform_range": 1.5 } }"#).unwrap();
    let out = blapose(dir.path(), &["--config", "bad.json", "gen-corpus", "--out", "corpus"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!dir.path().join("corpus").exists());
}

#[test]
fn missing_corpus_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = blapose(dir.path(), &["eval", "--corpus", "nowhere", "--pred", "p.bundle", "--out-dir", "e"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn zero_bench_steps_give_an_empty_report() {
    let dir = setup();
    let c = ["--config", "config.json"];
    for args in [
        &["train", "--corpus", "corpus", "--unidirectional", "--out", "online.bundle"][..],
        &["lift-toy", "--corpus", "corpus", "--save-lifter", "lifter.bundle", "--out", "lifted.bundle"],
        &["bench", "--corpus", "corpus", "--model", "online.bundle", "--lifter", "lifter.bundle", "--steps", "0", "--out", "bench.json"],
    ] {
        let out = blapose(dir.path(), &[&c[..], args].concat());
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("bench.json")).unwrap()).unwrap();
    assert_eq!(report["update_only"]["steps"], 0);
    assert_eq!(report["update_adjust"]["steps"], 0);
    assert_eq!(report["frames_seen"], 0);
}

#[test]
fn adjusting_lifted_poses_with_true_lengths_lowers_mpjpe() {
    let dir = setup();
    let c = ["--config", "config.json", "--json"];
    for args in [
        &["lift-toy", "--corpus", "corpus", "--split", "train", "--out", "lifted.bundle"][..],
        &["eval", "--corpus", "corpus", "--split", "train", "--pred", "lifted.bundle", "--out-dir", "before"],
        // Truth lengths from the corpus stand in for perfect predictions.
        &["adjust", "--poses", "lifted.bundle", "--lengths", "corpus/train.bundle", "--out", "adjusted.bundle"],
        &["eval", "--corpus", "corpus", "--split", "train", "--pred", "adjusted.bundle", "--out-dir", "after"],
    ] {
        let out = blapose(dir.path(), &[&c[..], args].concat());
        assert!(out.status.success(), "{:?}: {}", args, String::from_utf8_lossy(&out.stderr));
    }
    let score = |d: &str| {
        let v: serde_json::Value =
            serde_json::from_slice(&std::fs::read(dir.path().join(d).join("report.json")).unwrap()).unwrap();
        (v["overall"]["mpjpe_mm"].as_f64().unwrap(), v["overall"]["bone_len_err_mm"].as_f64().unwrap())
    };
    let (before, bone_before) = score("before");
    let (after, bone_after) = score("after");
    assert!(after < before, "{after} vs {before}");
    assert!(bone_after < 1e-3 && bone_before > bone_after);
}

#[test]
fn help_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    let out = blapose(dir.path(), &["--help"]);
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains("gen-corpus"));
}
