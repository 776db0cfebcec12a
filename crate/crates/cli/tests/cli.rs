use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use gatefuse::data::{load_dataset, total_utterances, SyntheticSpec};
use gatefuse::model::{AblationConfig, ModelDims, ModelParams};
use gatefuse_cli::checkpoint::Checkpoint;
use tempfile::TempDir;

fn gatefuse(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gatefuse"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = gatefuse(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn synth(dir: &Path, name: &str, extra: &[&str]) -> PathBuf {
    let mut args = vec!["synth", "--out", name];
    args.extend_from_slice(extra);
    ok(dir, &args);
    dir.join(name)
}

fn field(stdout: &str, key: &str) -> f64 {
    stdout
        .split_whitespace()
        .find_map(|tok| tok.strip_prefix(&format!("{key}=")))
        .unwrap_or_else(|| panic!("{key} missing from {stdout}"))
        .parse()
        .unwrap()
}

#[test]
fn synth_is_deterministic_and_loadable() {
    let dir = TempDir::new().unwrap();
    let a = synth(
        dir.path(),
        "a.jsonl",
        &["--videos", "20", "--mode", "xor", "--seed", "7"],
    );
    let b = synth(
        dir.path(),
        "b.jsonl",
        &["--videos", "20", "--mode", "xor", "--seed", "7"],
    );
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let videos = load_dataset(&a).unwrap();
    assert_eq!(videos.len(), 20);
    let c = synth(
        dir.path(),
        "c.jsonl",
        &["--videos", "20", "--mode", "xor", "--seed", "8"],
    );
    assert_ne!(std::fs::read(&a).unwrap(), std::fs::read(&c).unwrap());
}

#[test]
fn synth_zero_videos_writes_empty_file() {
    let dir = TempDir::new().unwrap();
    let p = synth(dir.path(), "empty.jsonl", &["--videos", "0"]);
    assert_eq!(std::fs::read(&p).unwrap().len(), 0);
    assert!(load_dataset(&p).unwrap().is_empty());
}

#[test]
fn synth_unwritable_path_exits_2() {
    let dir = TempDir::new().unwrap();
    let out = gatefuse(dir.path(), &["synth", "--out", "missing/dir/x.jsonl"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn zero_epoch_training_saves_initial_parameters() {
    let dir = TempDir::new().unwrap();
    synth(
        dir.path(),
        "t.jsonl",
        &[
            "--videos",
            "3",
            "--text-dim",
            "3",
            "--audio-dim",
            "2",
            "--video-dim",
            "4",
        ],
    );
    ok(
        dir.path(),
        &[
            "--seed",
            "4",
            "train",
            "--train",
            "t.jsonl",
            "--ablation",
            "b6",
            "--epochs",
            "0",
            "--hidden",
            "3",
            "--checkpoint",
            "m.ckpt",
            "--metrics",
            "h.csv",
        ],
    );
    let ckpt = Checkpoint::load(&dir.path().join("m.ckpt")).unwrap();
    let fresh = ModelParams::<f64>::new(ModelDims::new(3, 2, 4, 3), AblationConfig::B6, 4).unwrap();
    assert_eq!(ckpt.model, fresh);
    assert_eq!(ckpt.seed, 4);
    assert_eq!(
        std::fs::read_to_string(dir.path().join("h.csv")).unwrap(),
        "epoch,train_loss,val_acc,val_f1\n"
    );
}

#[test]
fn overfit_run_then_eval_and_predictions() {
    let dir = TempDir::new().unwrap();
    synth(
        dir.path(),
        "small.jsonl",
        &["--videos", "10", "--mode", "redundant", "--seed", "11"],
    );
    let stdout = ok(
        dir.path(),
        &[
            "train",
            "--train",
            "small.jsonl",
            "--val",
            "small.jsonl",
            "--hidden",
            "8",
            "--batch-size",
            "2",
            "--checkpoint",
            "m.ckpt",
            "--metrics",
            "h.csv",
        ],
    );
    assert!(field(&stdout, "train_accuracy") >= 0.99, "{stdout}");
    let history = std::fs::read_to_string(dir.path().join("h.csv")).unwrap();
    assert_eq!(history.lines().count(), 76);

    let args = [
        "eval",
        "--checkpoint",
        "m.ckpt",
        "--data",
        "small.jsonl",
        "--predictions",
        "p.csv",
    ];
    let first = ok(dir.path(), &args);
    let preds = std::fs::read_to_string(dir.path().join("p.csv")).unwrap();
    let second = ok(dir.path(), &args);
    assert_eq!(first, second);
    assert_eq!(preds, std::fs::read_to_string(dir.path().join("p.csv")).unwrap());
    assert!(field(&first, "accuracy") >= 0.99, "{first}");

    let mut lines = preds.lines();
    assert_eq!(lines.next(), Some("video_id,utt_idx,label,pred,p_pos"));
    let videos = load_dataset(dir.path().join("small.jsonl")).unwrap();
    assert_eq!(lines.count(), total_utterances(&videos));
}

#[test]
fn training_is_reproducible_from_the_command_line() {
    let dir = TempDir::new().unwrap();
    synth(
        dir.path(),
        "t.jsonl",
        &["--videos", "8", "--seed", "1", "--noise", "0.15"],
    );
    synth(
        dir.path(),
        "v.jsonl",
        &["--videos", "4", "--seed", "2", "--noise", "0.15"],
    );
    for run in ["1", "2"] {
        ok(
            dir.path(),
            &[
                "--seed",
                "5",
                "train",
                "--train",
                "t.jsonl",
                "--val",
                "v.jsonl",
                "--hidden",
                "4",
                "--epochs",
                "3",
                "--checkpoint",
                &format!("m{run}.ckpt"),
                "--metrics",
                &format!("h{run}.csv"),
            ],
        );
    }
    let read = |f: &str| std::fs::read(dir.path().join(f)).unwrap();
    assert_eq!(read("h1.csv"), read("h2.csv"));
    assert_eq!(read("m1.ckpt"), read("m2.ckpt"));
}

#[test]
fn config_file_drives_training() {
    let dir = TempDir::new().unwrap();
    synth(dir.path(), "t.jsonl", &["--videos", "4"]);
    std::fs::create_dir(dir.path().join("out")).unwrap();
    std::fs::write(
        dir.path().join("run.json"),
        r#"{"train": {"epochs": 2, "hidden": 3, "ablation": "b2"},
            "paths": {"train": "t.jsonl", "output_dir": "out"}}"#,
    )
    .unwrap();
    ok(dir.path(), &["--config", "run.json", "train"]);
    let ckpt = Checkpoint::load(&dir.path().join("out/model.ckpt")).unwrap();
    assert_eq!(ckpt.model.ablation, AblationConfig::B2);
    assert_eq!(ckpt.config.train.epochs, 2);
    let history = std::fs::read_to_string(dir.path().join("out/metrics.csv")).unwrap();
    assert_eq!(history.lines().count(), 3);
}

#[test]
fn config_errors_exit_2_naming_the_field() {
    let dir = TempDir::new().unwrap();
    synth(dir.path(), "t.jsonl", &["--videos", "2"]);
    for (doc, name) in [
        (r#"{"train": {"dropuot": 0.1}}"#, "dropuot"),
        (r#"{"train": {"dropout": 1.5}}"#, "dropout"),
        (r#"{"train": {"batch_size": 0}}"#, "batch_size"),
        (r#"{"synth": {"videos": 3}}"#, "videos"),
    ] {
        std::fs::write(dir.path().join("c.json"), doc).unwrap();
        let out = gatefuse(dir.path(), &["--config", "c.json", "train", "--train", "t.jsonl"]);
        assert_eq!(code(&out), 2, "{doc}");
        assert!(stderr(&out).contains(name), "{doc}: {}", stderr(&out));
    }
    let out = gatefuse(dir.path(), &["train", "--train", "t.jsonl", "--ablation", "b7"]);
    assert_eq!(code(&out), 2);
    let out = gatefuse(dir.path(), &["train"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn divergence_exits_3() {
    let dir = TempDir::new().unwrap();
    synth(dir.path(), "t.jsonl", &["--videos", "6"]);
    let out = gatefuse(
        dir.path(),
        &[
            "train",
            "--train",
            "t.jsonl",
            "--hidden",
            "3",
            "--epochs",
            "3",
            "--lr",
            "1e300",
            "--metrics",
            "h.csv",
        ],
    );
    assert_eq!(code(&out), 3, "{}", stderr(&out));
    assert!(stderr(&out).contains("epoch"), "{}", stderr(&out));
}

#[test]
fn eval_rejects_mismatched_dims_and_bad_checkpoints() {
    let dir = TempDir::new().unwrap();
    synth(dir.path(), "t.jsonl", &["--videos", "2"]);
    synth(dir.path(), "narrow.jsonl", &["--videos", "2", "--text-dim", "2"]);
    ok(
        dir.path(),
        &[
            "train",
            "--train",
            "t.jsonl",
            "--epochs",
            "0",
            "--hidden",
            "2",
            "--checkpoint",
            "m.ckpt",
        ],
    );
    let out = gatefuse(
        dir.path(),
        &["eval", "--checkpoint", "m.ckpt", "--data", "narrow.jsonl"],
    );
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("dims"), "{}", stderr(&out));

    let mut bytes = std::fs::read(dir.path().join("m.ckpt")).unwrap();
    bytes[8..12].copy_from_slice(&99u32.to_le_bytes());
    std::fs::write(dir.path().join("future.ckpt"), bytes).unwrap();
    let out = gatefuse(
        dir.path(),
        &["eval", "--checkpoint", "future.ckpt", "--data", "t.jsonl"],
    );
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("version 99"), "{}", stderr(&out));
}

#[test]
fn inspect_reports_gates_and_self_scores() {
    let dir = TempDir::new().unwrap();
    synth(
        dir.path(),
        "t.jsonl",
        &["--videos", "3", "--min-utterances", "1", "--max-utterances", "5"],
    );
    synth(
        dir.path(),
        "single.jsonl",
        &["--videos", "1", "--min-utterances", "1", "--max-utterances", "1"],
    );
    ok(
        dir.path(),
        &[
            "train",
            "--train",
            "t.jsonl",
            "--epochs",
            "2",
            "--hidden",
            "3",
            "--checkpoint",
            "m.ckpt",
        ],
    );

    let text = ok(
        dir.path(),
        &[
            "inspect",
            "--checkpoint",
            "m.ckpt",
            "--data",
            "t.jsonl",
            "--video",
            "synth-00002",
        ],
    );
    assert!(
        text.contains("G_VT") && text.contains("S_T_mean") && text.contains("mean gates:"),
        "{text}"
    );

    let json = ok(
        dir.path(),
        &[
            "inspect",
            "--checkpoint",
            "m.ckpt",
            "--data",
            "t.jsonl",
            "--video",
            "synth-00001",
            "--json",
        ],
    );
    let v: serde_json::Value = serde_json::from_str(&json).unwrap();
    let utts = v["utterances"].as_array().unwrap();
    assert!(!utts.is_empty());
    for u in utts {
        for g in u["gates"].as_array().unwrap() {
            let g = g.as_f64().unwrap();
            assert!(g > 0.0 && g < 1.0);
        }
    }
    assert_eq!(v["mean_gates"].as_array().unwrap().len(), 6);

    let single = ok(
        dir.path(),
        &[
            "inspect",
            "--checkpoint",
            "m.ckpt",
            "--data",
            "single.jsonl",
            "--video",
            "synth-00000",
            "--json",
        ],
    );
    let v: serde_json::Value = serde_json::from_str(&single).unwrap();
    for s in v["utterances"][0]["self_diagonal"].as_array().unwrap() {
        assert_eq!(s.as_f64().unwrap(), 1.0);
    }

    let out = gatefuse(
        dir.path(),
        &[
            "inspect",
            "--checkpoint",
            "m.ckpt",
            "--data",
            "t.jsonl",
            "--video",
            "nope",
        ],
    );
    assert_eq!(code(&out), 2);
}

#[test]
fn gradcheck_defaults_pass_and_are_deterministic() {
    let dir = TempDir::new().unwrap();
    let a = ok(
        dir.path(),
        &["gradcheck", "--epsilon", "1e-5", "--samples", "200", "--seed", "3"],
    );
    let b = ok(
        dir.path(),
        &["gradcheck", "--epsilon", "1e-5", "--samples", "200", "--seed", "3"],
    );
    assert_eq!(a, b);
    assert!(a.contains("PASS"), "{a}");
    assert!(field(&a, "checked") >= 200.0);
    ok(dir.path(), &["gradcheck"]);
}

#[test]
fn gradcheck_catches_a_corrupted_backward_rule() {
    let dir = TempDir::new().unwrap();
    let out = gatefuse(dir.path(), &["gradcheck", "--inject-fault"]);
    assert_eq!(code(&out), 1);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("FAIL worst="), "{stdout}");
}

#[test]
fn default_synthetic_spec_matches_cli_defaults() {
    let dir = TempDir::new().unwrap();
    let p = synth(dir.path(), "d.jsonl", &[]);
    let videos = load_dataset(&p).unwrap();
    let spec = SyntheticSpec::default();
    assert_eq!(videos.len(), spec.n_videos);
    assert_eq!(videos, gatefuse::data::synth_generate(&spec).unwrap());
}
