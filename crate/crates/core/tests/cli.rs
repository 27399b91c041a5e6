use std::path::Path;
use std::process::{Command, Output};

use ffcac::protocol::read_reports;

fn ffcac(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ffcac")).current_dir(dir).args(args).output().expect("binary runs")
}

fn text(o: &Output) -> String {
    format!("{}{}", String::from_utf8_lossy(&o.stdout), String::from_utf8_lossy(&o.stderr))
}

fn tiny_spec(classes: usize, clips: usize, seed: u64) -> String {
    let mut s = format!(
        "n_classes = {classes}\nclip_len_s = 0.32\nclips_per_class = {clips}\nsample_rate = 16000\nf0_jitter = 0.01\nseed = {seed}\n"
    );
    for c in 0..classes {
        s.push_str(&format!(
            "\n[[classes]]\nlabel = \"k{c}\"\nfundamental_hz = {}\nharmonic_weights = [1.0, 0.5]\nnoise_level = 0.02\n",
            200.0 * 1.35f64.powi(c as i32)
        ));
    }
    s
}

const TINY_CONFIG: &str = "\
[data]
protocol_manifest = \"proto/manifest.jsonl\"
pretrain_manifest = \"pre/manifest.jsonl\"

[pretrain]
epochs = 2
batch_size = 8

[protocol]
sessions = 2
ways = 2
shots = 2
test_per_class = 2
repeats = 3

[training]
epochs = 3

[output]
root = \"out\"
";

/// A 4-class protocol corpus, a 3-class pretraining corpus, a config with a
/// two-session protocol and a pretrained encoder.
fn workspace() -> tempfile::TempDir {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    std::fs::write(d.join("proto.toml"), tiny_spec(4, 6, 1)).unwrap();
    std::fs::write(d.join("pre.toml"), tiny_spec(3, 6, 2)).unwrap();
    std::fs::write(d.join("run.toml"), TINY_CONFIG).unwrap();
    for (spec, out) in [("proto.toml", "proto"), ("pre.toml", "pre")] {
        let o = ffcac(d, &["generate", "--spec", spec, "--out", out]);
        assert!(o.status.success(), "{}", text(&o));
    }
    let o = ffcac(d, &["pretrain", "--config", "run.toml"]);
    assert!(o.status.success(), "{}", text(&o));
    tmp
}

#[test]
fn generate_default_and_seeded() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    std::fs::write(d.join("s.toml"), tiny_spec(3, 2, 5)).unwrap();
    for out in ["a", "b"] {
        let o = ffcac(d, &["generate", "--spec", "s.toml", "--out", out, "--seed", "9"]);
        assert_eq!(o.status.code(), Some(0), "{}", text(&o));
    }
    let a = std::fs::read(d.join("a/k1/k1_001.wav")).unwrap();
    assert_eq!(a, std::fs::read(d.join("b/k1/k1_001.wav")).unwrap());
    assert_eq!(std::fs::read_to_string(d.join("a/manifest.jsonl")).unwrap().lines().count(), 6);
}

#[test]
fn malformed_spec_names_the_field() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    std::fs::write(d.join("bad.toml"), tiny_spec(2, 2, 0).replace("clips_per_class", "clips_per_klass")).unwrap();
    let o = ffcac(d, &["generate", "--spec", "bad.toml", "--out", "x"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(text(&o).contains("clips_per_klass"), "{}", text(&o));
    std::fs::write(d.join("neg.toml"), tiny_spec(2, 2, 0).replace("noise_level = 0.02", "noise_level = -1.0")).unwrap();
    let o = ffcac(d, &["generate", "--spec", "neg.toml", "--out", "y"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(text(&o).contains("noise_level"), "{}", text(&o));
}

#[test]
fn usage_errors_exit_one() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    assert_eq!(ffcac(d, &["frobnicate"]).status.code(), Some(1));
    assert_eq!(ffcac(d, &["--help"]).status.code(), Some(0));
    std::fs::write(d.join("c.toml"), "[training]\nepochz = 1\n").unwrap();
    let o = ffcac(d, &["run", "--config", "c.toml", "--dry-run"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(text(&o).contains("epochz"));
}

#[test]
fn dry_run_prints_resolved_defaults() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    std::fs::write(d.join("c.toml"), "").unwrap();
    let o = ffcac(d, &["run", "--config", "c.toml", "--dry-run"]);
    assert_eq!(o.status.code(), Some(0), "{}", text(&o));
    let out = text(&o);
    for key in ["variant = \"P_PLUS_EXPANDED_F\"", "epochs = 100", "lr0 = 0.001", "sessions = 5", "# digest "] {
        assert!(out.contains(key), "missing {key} in\n{out}");
    }
    assert!(!d.join("runs").exists());
}

#[test]
fn pipeline_commands() {
    let tmp = workspace();
    let d = tmp.path();

    let o = ffcac(d, &["pretrain", "--config", "run.toml"]);
    assert_eq!(o.status.code(), Some(1), "refuses to overwrite: {}", text(&o));
    let before = std::fs::read(d.join("out/pretrain/encoder.ffck")).unwrap();
    let o = ffcac(d, &["pretrain", "--config", "run.toml", "--force"]);
    assert!(o.status.success(), "{}", text(&o));
    assert_eq!(before, std::fs::read(d.join("out/pretrain/encoder.ffck")).unwrap(), "pretraining is deterministic");
    let o = ffcac(d, &["pretrain", "--config", "run.toml", "--resume"]);
    assert!(o.status.success(), "{}", text(&o));
    assert_eq!(before, std::fs::read(d.join("out/pretrain/encoder.ffck")).unwrap());

    let o = ffcac(d, &["run", "--config", "run.toml", "--out", "r"]);
    assert!(o.status.success(), "{}", text(&o));
    let run = read_reports(&d.join("r/report.jsonl")).unwrap();
    assert_eq!(run.len(), 1);
    assert_eq!(run[0].accuracies.len(), 2);
    assert!(run[0].completed);
    assert!(d.join("r/session_1/ede/branch_1.ffck").is_file());
    assert!(d.join("r/session_1/class_stats.bin").is_file());

    let o = ffcac(d, &["bench", "--config", "run.toml", "--repeats", "1", "--out", "one.jsonl"]);
    assert!(o.status.success(), "{}", text(&o));
    let one = std::fs::read_to_string(d.join("one.jsonl")).unwrap();
    assert_eq!(one, std::fs::read_to_string(d.join("r/report.jsonl")).unwrap(), "R = 1 equals run");

    for (jobs, out) in [("1", "j1.jsonl"), ("3", "j3.jsonl")] {
        let o = ffcac(d, &["bench", "--config", "run.toml", "--jobs", jobs, "--out", out]);
        assert!(o.status.success(), "{}", text(&o));
    }
    let j1 = std::fs::read_to_string(d.join("j1.jsonl")).unwrap();
    assert_eq!(j1.lines().count(), 3);
    assert_eq!(j1, std::fs::read_to_string(d.join("j3.jsonl")).unwrap());

    let o = ffcac(d, &["bench", "--config", "run.toml", "--method", "finetune", "--out", "ft.jsonl"]);
    assert!(o.status.success(), "{}", text(&o));

    let o = ffcac(d, &["stats", "--inputs", "j1.jsonl"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(text(&o).contains("at least two methods"));
    let o = ffcac(d, &["stats", "--inputs", "j1.jsonl", "j3.jsonl", "--out", "same.json"]);
    assert!(o.status.success(), "{}", text(&o));
    let same: serde_json::Value = serde_json::from_slice(&std::fs::read(d.join("same.json")).unwrap()).unwrap();
    let bars = same["average_accuracy"]["diagram"]["bars"].as_array().unwrap();
    assert_eq!(bars.len(), 1, "identical inputs form one group");
    let o = ffcac(d, &["stats", "--inputs", "j1.jsonl", "ft.jsonl", "--per-session", "--alpha", "0.1"]);
    assert!(o.status.success(), "{}", text(&o));
    assert!(text(&o).contains("Session 1"));
    let o = ffcac(d, &["stats", "--inputs", "j1.jsonl", "ft.jsonl", "--alpha", "0.01"]);
    assert_eq!(o.status.code(), Some(1));

    let o = ffcac(d, &["report", "--run", "j1.jsonl", "--csv"]);
    assert!(o.status.success(), "{}", text(&o));
    let csv = String::from_utf8(o.stdout).unwrap();
    let row: Vec<&str> = csv.lines().nth(1).unwrap().split(',').collect();
    let reports = read_reports(&d.join("j1.jsonl")).unwrap();
    let mean = reports.iter().map(|r| r.accuracies.iter().sum::<f64>() / 2.0).sum::<f64>() / 3.0;
    assert_eq!(row[5], format!("{mean:.4}"), "AA column from session means");

    let o = ffcac(d, &["ablate", "--config", "run.toml", "--repeats", "2", "--out", "abl"]);
    assert!(o.status.success(), "{}", text(&o));
    let table = std::fs::read_to_string(d.join("abl/table.md")).unwrap();
    for v in ["P_ONLY", "F_ONLY", "P_PLUS_F", "P_PLUS_EXPANDED_F"] {
        assert!(table.contains(&format!("| {v} |")), "{table}");
        let seeds: Vec<u64> = read_reports(&d.join(format!("abl/{v}.jsonl"))).unwrap().iter().map(|r| r.seed).collect();
        assert_eq!(seeds, vec![0, 1]);
    }
}

#[test]
fn missing_corpus_is_a_runtime_failure() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    std::fs::write(d.join("run.toml"), TINY_CONFIG).unwrap();
    let o = ffcac(d, &["pretrain", "--config", "run.toml"]);
    assert_eq!(o.status.code(), Some(2), "{}", text(&o));
}
