use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use reinforce_tts::signal::{load_audio, SAMPLE_RATE};

fn cli(workdir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_reinforce-tts"))
        .arg("--workdir")
        .arg(workdir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Demo corpus plus a two-step training run under `wd/d`.
fn trained(wd: &Path) {
    ok(&cli(wd, &["demo", "--out", "d", "--steps", "2"]));
    ok(&cli(wd, &["train", "--config", "d/config.toml"]));
}

#[test]
fn help_lists_every_flag() {
    let out = Command::new(env!("CARGO_BIN_EXE_reinforce-tts")).arg("--help").output().unwrap();
    ok(&out);
    let text = String::from_utf8_lossy(&out.stdout);
    for word in ["train", "synth", "eval", "plot-align", "--workdir", "--seed"] {
        assert!(text.contains(word), "{word} missing from\n{text}");
    }
    let out = Command::new(env!("CARGO_BIN_EXE_reinforce-tts"))
        .args(["eval", "--help"])
        .output()
        .unwrap();
    let text = String::from_utf8_lossy(&out.stdout);
    for word in ["--ckpt", "--split", "--durations", "--out-dir"] {
        assert!(text.contains(word), "{word} missing from\n{text}");
    }
}

#[test]
fn unknown_flag_prints_usage_and_fails() {
    let dir = tempfile::tempdir().unwrap();
    let out = cli(dir.path(), &["train", "--config", "x.toml", "--bogus"]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("Usage"));
}

#[test]
fn missing_files_fail_with_a_message() {
    let dir = tempfile::tempdir().unwrap();
    let out = cli(dir.path(), &["train", "--config", "absent.toml"]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("absent.toml"));
    let out = cli(dir.path(), &["synth", "--ckpt", "nowhere", "--text", "a", "--out", "a.wav"]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("no checkpoint"));
}

#[test]
fn schema_violations_name_the_key() {
    let dir = tempfile::tempdir().unwrap();
    ok(&cli(dir.path(), &["demo", "--out", "d", "--steps", "1"]));
    let cfg = fs::read_to_string(dir.path().join("d/config.toml")).unwrap();
    let bad = cfg.replace("[train]\n", "[train]\nlearning_rte = 0.1\n");
    fs::write(dir.path().join("bad.toml"), bad).unwrap();
    let out = cli(dir.path(), &["train", "--config", "bad.toml"]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("learning_rte"), "{}", stderr(&out));
}

#[test]
fn two_step_train_then_synth_eval_and_plot() {
    let dir = tempfile::tempdir().unwrap();
    let wd = dir.path();
    trained(wd);
    let metrics = fs::read_to_string(wd.join("d/run/metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 2);
    for line in metrics.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v["losses"].is_object() && v["reward_shift_fraction"].is_number() && v["lr"].is_number());
    }

    ok(&cli(wd, &["synth", "--ckpt", "d/run", "--text", "bead", "--out", "out/bead.wav"]));
    let wav = load_audio(wd.join("out/bead.wav")).unwrap();
    assert_eq!(wav.sample_rate, SAMPLE_RATE);
    assert!(!wav.is_empty() && wav.len() % 256 == 0);

    ok(&cli(
        wd,
        &["eval", "--ckpt", "d/run", "--split", "test", "--durations", "d/corpus/durations.tsv", "--out-dir", "out/eval"],
    ));
    let mut rows = csv::Reader::from_path(wd.join("out/eval/metrics.csv")).unwrap();
    // The demo config holds out one test utterance.
    assert_eq!(rows.records().count(), 1);
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(wd.join("out/eval/summary.json")).unwrap()).unwrap();
    assert_eq!(summary["utterances"], 1);

    ok(&cli(wd, &["plot-align", "--ckpt", "d/run", "--text", "bead", "--out", "out/bead.png"]));
    assert!(fs::read(wd.join("out/bead.png")).unwrap().starts_with(b"\x89PNG"));
}

#[test]
fn seeded_runs_reproduce_their_logs() {
    let dir = tempfile::tempdir().unwrap();
    let wd = dir.path();
    ok(&cli(wd, &["demo", "--out", "d", "--steps", "2"]));
    let run = |seed: &str| {
        ok(&cli(wd, &["--seed", seed, "train", "--config", "d/config.toml"]));
        fs::read_to_string(wd.join("d/run/metrics.jsonl")).unwrap()
    };
    let a = run("7");
    let b = run("7");
    let c = run("8");
    assert_eq!(a, b);
    assert_ne!(a, c);
}
