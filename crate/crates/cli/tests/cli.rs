use std::path::Path;
use std::process::{Command, Output};

fn uaan(args: &[&str], cwd: &Path) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_uaan"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs");
    if !out.status.success() {
        panic!(
            "uaan {args:?} failed\nstdout:\n{}\nstderr:\n{}",
            String::from_utf8_lossy(&out.stdout),
            String::from_utf8_lossy(&out.stderr)
        );
    }
    out
}

#[test]
fn generate_train_detect_eval() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    uaan(
        &["gen-synth", "--classes", "3", "--clips", "6", "--frames", "16", "--objects", "2", "--noise", "0.1",
          "--seed", "4", "--out-dir", "data"],
        root,
    );
    assert!(root.join("data/train.json").exists());
    assert!(root.join("data/test.json").exists());

    std::fs::write(
        root.join("run.toml"),
        "epochs = 2\nwidth = 16\ntrain_manifest = \"data/train.json\"\n",
    )
    .unwrap();
    uaan(&["train", "--config", "run.toml", "--out", "run"], root);
    let log = std::fs::read_to_string(root.join("run/loss_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 3, "{log}");
    assert!(log.starts_with("epoch,L_ABS,L_Beta,L_reg,L_DIoU,L_final"));

    uaan(&["train", "--config", "run.toml", "--out", "again"], root);
    assert_eq!(
        std::fs::read(root.join("run/checkpoint.ckpt")).unwrap(),
        std::fs::read(root.join("again/checkpoint.ckpt")).unwrap()
    );

    let out = uaan(
        &["detect", "--ckpt", "run/checkpoint.ckpt", "--clip", "data/test/test_0000.uaan", "--u-tau", "0.6",
          "--a-tau", "0.5"],
        root,
    );
    for line in String::from_utf8(out.stdout).unwrap().lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["video_id"], "test_0000");
    }

    uaan(
        &["detect", "--ckpt", "run/checkpoint.ckpt", "--manifest", "data/test.json", "--out", "dets.jsonl"],
        root,
    );
    let out = uaan(
        &["eval", "--detections", "dets.jsonl", "--manifest", "data/test.json", "--tiou", "0.3,0.5,0.7",
          "--json", "metrics.json"],
        root,
    );
    let table = String::from_utf8(out.stdout).unwrap();
    assert!(table.contains("@0.50") && table.contains("AUROC"), "{table}");
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(root.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(report["map_per_tiou"].as_object().unwrap().len(), 3);
}

#[test]
fn resume_continues_the_log() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    uaan(&["gen-synth", "--clips", "4", "--frames", "12", "--out-dir", "data"], root);
    std::fs::write(root.join("a.toml"), "epochs = 1\nwidth = 8\ntrain_manifest = \"data/train.json\"\n").unwrap();
    std::fs::write(root.join("b.toml"), "epochs = 2\nwidth = 8\ntrain_manifest = \"data/train.json\"\n").unwrap();
    uaan(&["train", "--config", "a.toml", "--out", "run"], root);
    uaan(&["train", "--config", "b.toml", "--out", "run", "--resume", "run/checkpoint.ckpt"], root);
    uaan(&["train", "--config", "b.toml", "--out", "straight"], root);
    for file in ["loss_log.csv", "checkpoint.ckpt"] {
        assert_eq!(
            std::fs::read(root.join("run").join(file)).unwrap(),
            std::fs::read(root.join("straight").join(file)).unwrap(),
            "{file}"
        );
    }
}

#[test]
fn gradcheck_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = uaan(&["gradcheck"], dir.path());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("ok"), "{text}");
}

#[test]
fn bad_config_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.toml"), "learning_rate = -1.0\n").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_uaan"))
        .args(["train", "--config", "bad.toml", "--out", "run"])
        .current_dir(dir.path())
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));
}
