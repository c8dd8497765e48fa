use std::path::Path;
use std::process::{Command, Output};

fn cift(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cift"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

const TINY: &str = r#"{
  "seed": 5,
  "steps": 3,
  "batch_size": 2,
  "model": {"vocab": 8, "feat_dim": 4, "d_model": 8, "d_embed": 4, "heads": 2,
            "ffn_dim": 8, "enc_layers": 1, "ctx_layers": 1},
  "train_data": "train.jsonl",
  "checkpoint": "model.ckpt",
  "metrics": "metrics.jsonl"
}"#;

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    let o = cift(
        dir.path(),
        &[
            "gen-data",
            "--out",
            "train.jsonl",
            "--vocab",
            "8",
            "--feat-dim",
            "4",
            "--count",
            "6",
            "--max-tokens",
            "4",
        ],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    std::fs::write(dir.path().join("run.json"), TINY).unwrap();
    dir
}

#[test]
fn train_eval_decode_round_trip() {
    let dir = setup();
    let o = cift(dir.path(), &["train", "--config", "run.json", "--mode", "cift"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let log = std::fs::read_to_string(dir.path().join("metrics.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 3);

    let o = cift(
        dir.path(),
        &["eval", "--checkpoint", "model.ckpt", "--data", "train.jsonl"],
    );
    assert_eq!(code(&o), 0);
    let report: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(report["cer"].as_f64().unwrap() >= 0.0);

    for out in ["a.jsonl", "b.jsonl"] {
        let o = cift(
            dir.path(),
            &[
                "decode",
                "--checkpoint",
                "model.ckpt",
                "--data",
                "train.jsonl",
                "--out",
                out,
            ],
        );
        assert_eq!(code(&o), 0);
    }
    let a = std::fs::read(dir.path().join("a.jsonl")).unwrap();
    assert_eq!(a, std::fs::read(dir.path().join("b.jsonl")).unwrap());
    for line in String::from_utf8(a).unwrap().lines() {
        let h: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(h["tokens"].as_array().unwrap().iter().all(|t| t.as_u64().unwrap() < 8));
    }

    let o = cift(
        dir.path(),
        &[
            "decode",
            "--checkpoint",
            "model.ckpt",
            "--data",
            "train.jsonl",
            "--out",
            "c.jsonl",
            "--mode",
            "rnnt-baseline",
        ],
    );
    assert_eq!(code(&o), 2);
}

#[test]
fn exit_codes() {
    let dir = setup();
    // no seed anywhere
    let o = cift(
        dir.path(),
        &["train", "--train-data", "train.jsonl", "--checkpoint", "x.ckpt"],
    );
    assert_eq!(code(&o), 2);
    // malformed config
    std::fs::write(dir.path().join("bad.json"), "{\"seed\": 1, \"steps\": -4}").unwrap();
    assert_eq!(code(&cift(dir.path(), &["train", "--config", "bad.json"])), 2);
    // missing corpus
    let o = cift(
        dir.path(),
        &["train", "--config", "run.json", "--train-data", "missing.jsonl"],
    );
    assert_eq!(code(&o), 3);
    // corrupt corpus line
    std::fs::write(dir.path().join("broken.jsonl"), "{\"id\": \"a\"\n").unwrap();
    let o = cift(
        dir.path(),
        &["train", "--config", "run.json", "--train-data", "broken.jsonl"],
    );
    assert_eq!(code(&o), 3);
    // not a checkpoint
    let o = cift(
        dir.path(),
        &["eval", "--checkpoint", "train.jsonl", "--data", "train.jsonl"],
    );
    assert_eq!(code(&o), 2);
    // bad generator settings
    let o = cift(
        dir.path(),
        &["gen-data", "--out", "g.jsonl", "--min-tokens", "5", "--max-tokens", "2"],
    );
    assert_eq!(code(&o), 2);
}

#[test]
fn gradcheck_command_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = cift(dir.path(), &["gradcheck", "--mode", "rnnt-baseline"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let r: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(r["passed"], true);
    let o = cift(dir.path(), &["gradcheck", "--mode", "cift", "--tolerance", "0"]);
    assert_eq!(code(&o), 4);
}
