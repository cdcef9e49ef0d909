use std::path::Path;
use std::process::{Command, Output};

fn point3d(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_point3d"))
        .current_dir(dir)
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

const TINY: &str = r#"
[synth]
num_clips = 4
eval_clips = 2
frames = 4
size = 32
actors_per_clip = [1, 1]
actor_size = [6.0, 10.0]

[model]
size = 32
channels = 4
stem_channels = 3
head_channels = 2
head3d_channels = 4
frames = 4

[train]
steps = 3
log_every = 0

[paths]
data = "data"
run = "run"
"#;

#[test]
fn help_documents_every_command_and_flag() {
    let dir = tempfile::tempdir().unwrap();
    let o = point3d(dir.path(), &["--help"]);
    assert_eq!(code(&o), 0);
    let text = String::from_utf8_lossy(&o.stdout);
    for word in [
        "synth", "train", "decode", "link", "eval", "gradcheck", "ablate", "visualize", "inspect-attention",
        "--config", "--set", "--threads",
    ] {
        assert!(text.contains(word), "help lacks {word}");
    }
    let o = point3d(dir.path(), &["visualize", "--help"]);
    let text = String::from_utf8_lossy(&o.stdout);
    for flag in ["--clip", "--detections", "--gt", "--format", "--scale", "--out"] {
        assert!(text.contains(flag), "visualize help lacks {flag}");
    }
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&point3d(dir.path(), &["frobnicate"])), 1);
    assert_eq!(code(&point3d(dir.path(), &["train", "--bogus"])), 1);
    std::fs::write(dir.path().join("bad.toml"), "[model]\nwidth = 3\n").unwrap();
    let o = point3d(dir.path(), &["--config", "bad.toml", "train"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("width"));
    assert_eq!(code(&point3d(dir.path(), &["--set", "train.nope=1", "train"])), 2);
    assert_eq!(code(&point3d(dir.path(), &["--config", "missing.toml", "train"])), 2);
    assert_eq!(code(&point3d(dir.path(), &["--threads", "0", "train"])), 2);
    // No dataset on disk.
    assert_eq!(code(&point3d(dir.path(), &["train"])), 3);
    assert_eq!(code(&point3d(dir.path(), &["link", "--detections", "none.jsonl"])), 3);
}

#[test]
fn gradcheck_on_a_fresh_seed_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = point3d(dir.path(), &["gradcheck", "--seeds", "1", "--first-seed", "1234"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    assert!(String::from_utf8_lossy(&o.stdout).contains("passed"));
}

#[test]
fn synth_train_decode_link_eval_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("tiny.toml"), TINY).unwrap();
    let run = |args: &[&str]| {
        let mut all = vec!["--config", "tiny.toml", "--threads", "2"];
        all.extend_from_slice(args);
        let o = point3d(d, &all);
        assert_eq!(code(&o), 0, "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
        o
    };
    run(&["synth"]);
    assert!(d.join("data/train/annotations.json").exists());
    assert!(d.join("data/eval/clips/clip00004.ptk").exists());
    run(&["train", "--set", "train.steps=2"]);
    let echoed = std::fs::read_to_string(d.join("run/config.toml")).unwrap();
    assert!(echoed.contains("steps = 2"));
    let trace = std::fs::read_to_string(d.join("run/loss.jsonl")).unwrap();
    assert_eq!(trace.lines().count(), 2);
    assert!(d.join("run/checkpoint/manifest.json").exists());
    // A threshold of zero keeps every peak so linking has input.
    run(&["decode", "--set", "decode.threshold=0.0"]);
    assert!(std::fs::read_to_string(d.join("run/detections.jsonl")).unwrap().lines().count() > 0);
    run(&["link"]);
    let tubes: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("run/tubes.json")).unwrap()).unwrap();
    assert!(!tubes.as_array().unwrap().is_empty());
    let o = run(&["eval"]);
    let report: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    for key in ["frame_map", "video_map", "errors"] {
        assert!(report.get(key).is_some(), "{key}");
    }
    assert!(d.join("run/eval_report.json").exists());
    assert!(std::fs::read_to_string(d.join("run/pr_curves.csv")).unwrap().starts_with("class,"));

    let o = run(&["inspect-attention", "--clip", "clip00004"]);
    let csv = String::from_utf8_lossy(&o.stdout).to_string();
    assert_eq!(csv.lines().count(), 4);
    for line in csv.lines() {
        let s: f64 = line.split(',').map(|v| v.parse::<f64>().unwrap()).sum();
        assert!((s - 1.0).abs() < 1e-6);
    }

    run(&["visualize", "--clip", "clip00004", "--detections", "run/detections.jsonl", "--format", "ppm", "--out", "frames"]);
    assert_eq!(std::fs::read_dir(d.join("frames")).unwrap().count(), 4);
    let head = std::fs::read(d.join("frames/clip00004_f000.ppm")).unwrap();
    assert!(head.starts_with(b"P6\n128 128\n255\n"));
}

#[test]
fn visualize_without_detections_draws_ground_truth() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("tiny.toml"), TINY).unwrap();
    assert_eq!(code(&point3d(d, &["--config", "tiny.toml", "synth"])), 0);
    let empty = d.join("empty.jsonl");
    std::fs::write(&empty, "").unwrap();
    let o = point3d(
        d,
        &["--config", "tiny.toml", "visualize", "--clip", "clip00000", "--split", "train", "--detections", "empty.jsonl", "--out", "svg"],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let svg = std::fs::read_to_string(d.join("svg/clip00000_f000.svg")).unwrap();
    assert!(svg.contains("gt c"));
    assert!(!svg.contains("rgb(230,40,40)"));
    assert_eq!(code(&point3d(d, &["--config", "tiny.toml", "visualize", "--clip", "nope"])), 3);
}
