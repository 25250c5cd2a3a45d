use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
n_utts_per_cell = 1
frame_rate = 16.0
min_duration = 1.0
max_duration = 2.0
slice_seconds = 1.0
n_layers = 1
d_model = 8
d_ffn = 16
d_emb = 8
decoder_channels = 8
decoder_hidden = 8
batch_size = 8
steps = 4
q_hidden = 8
checkpoint_interval = 2
probe_epochs = 50
tsne_iterations = 100
tsne_perplexity = 5.0
rec_d_content = 4
rec_content_channels = 4
rec_hidden = 8
rec_window_seconds = 1.0
rec_steps = 5
rec_batch_size = 4
"#;

fn srl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_srl")).args(args).output().expect("binary runs")
}

fn tiny_config(dir: &Path) -> String {
    let p = dir.join("tiny.toml");
    fs::write(&p, TINY).unwrap();
    p.to_str().unwrap().to_string()
}

fn ok(out: &Output) {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
}

fn stderr_json(out: &Output) -> serde_json::Value {
    let text = String::from_utf8_lossy(&out.stderr);
    let line = text.trim();
    assert_eq!(line.lines().count(), 1, "{text}");
    serde_json::from_str(line).unwrap()
}

#[test]
fn unknown_subcommand_exits_2_without_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("run");
    let out = srl(&["bogus", "--out", out_dir.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!out_dir.exists());
}

#[test]
fn help_lists_flags_and_defaults() {
    let out = srl(&["--help"]);
    ok(&out);
    let text = String::from_utf8_lossy(&out.stdout);
    for word in ["synth-data", "train", "eval", "embed", "plot", "recombine", "lambda_mi = 1.0", "q_steps_per_step = 5"] {
        assert!(text.contains(word), "missing {word}");
    }
    let out = srl(&["train", "--help"]);
    let text = String::from_utf8_lossy(&out.stdout);
    for flag in ["--config", "--seed", "--out", "--manifest", "--resume"] {
        assert!(text.contains(flag), "missing {flag}");
    }
}

#[test]
fn config_errors_exit_3_with_one_json_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "batch_size = 10\n").unwrap();
    let out = srl(&["synth-data", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));
    assert_eq!(stderr_json(&out)["error"], "config");

    fs::write(&cfg, "no_such_key = 1\n").unwrap();
    let out = srl(&["synth-data", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));

    let missing = dir.path().join("missing.toml");
    let out = srl(&["synth-data", "--config", missing.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn runtime_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let out = srl(&["eval", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(stderr_json(&out)["error"], "runtime");
}

#[test]
fn synth_data_writes_full_factorial_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out_dir = dir.path().join("run");
    for n in [1u32, 2] {
        fs::write(&cfg, TINY.replace("n_utts_per_cell = 1", &format!("n_utts_per_cell = {n}"))).unwrap();
        ok(&srl(&["synth-data", "--config", &cfg, "--out", out_dir.to_str().unwrap()]));
        let manifest = srl::corpus::load_manifest(out_dir.join("manifest.jsonl")).unwrap();
        assert_eq!(manifest.len(), (3 * 6 * 5 * n) as usize);
    }
}

fn full_run(dir: &Path, cfg: &str, seed: &str) {
    let out = dir.to_str().unwrap();
    for cmd in ["synth-data", "train", "eval", "embed"] {
        ok(&srl(&[cmd, "--config", cfg, "--seed", seed, "--out", out]));
    }
    ok(&srl(&["plot", "--config", cfg, "--seed", seed, "--out", out, "--space", "emotion", "--color-by", "speaker"]));
}

#[test]
fn train_then_eval_then_recombine() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let run = dir.path().join("run");
    full_run(&run, &cfg, "3");
    assert!(run.join("ckpt/step_00000002.ckpt").exists());
    assert!(run.join("ckpt/step_00000004.ckpt").exists());
    assert_eq!(fs::read_to_string(run.join("metrics.log")).unwrap().lines().count(), 4);
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("reports/eval.json")).unwrap()).unwrap();
    let probes = report["probes"].as_array().unwrap();
    assert_eq!(probes.len(), 9);
    for p in probes {
        let acc = p["accuracy"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&acc));
        assert!(p["n_test"].as_u64().unwrap() > 0);
    }
    assert!(run.join("plots/tsne_emotion_by_speaker.png").exists());
    assert!(run.join("plots/tsne_emotion_by_speaker.csv").exists());

    let manifest = srl::corpus::load_manifest(run.join("manifest.jsonl")).unwrap();
    let ids: Vec<String> = manifest.entries.iter().map(|u| u.utterance_id.clone()).collect();
    let out = srl(&[
        "recombine", "--config", &cfg, "--seed", "3", "--out", run.to_str().unwrap(),
        "--style-ref", &ids[0], "--emotion-ref", &ids[1], "--speaker-ref", &ids[2], "--content-ref", &ids[3],
    ]);
    ok(&out);
    let rec: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("reports/recombine.json")).unwrap()).unwrap();
    assert_eq!(rec["frames"].as_array().unwrap().len(), 16);
    assert_eq!(rec["oracle"].as_array().unwrap().len(), 3);
    assert!(run.join("ckpt/recombiner.ckpt").exists());

    let out = srl(&[
        "recombine", "--config", &cfg, "--out", run.to_str().unwrap(),
        "--style-ref", "nope", "--emotion-ref", &ids[1], "--speaker-ref", &ids[2], "--content-ref", &ids[3],
    ]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn equal_seeds_give_byte_identical_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    full_run(&a, &cfg, "9");
    full_run(&b, &cfg, "9");
    full_run(&c, &cfg, "10");
    let artifacts = [
        "manifest.jsonl",
        "metrics.log",
        "ckpt/latest.ckpt",
        "ckpt/step_00000002.ckpt",
        "reports/eval.json",
        "reports/embeddings.jsonl",
        "plots/tsne_emotion_by_speaker.csv",
    ];
    for f in artifacts {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f} differs");
    }
    assert_ne!(fs::read(a.join("metrics.log")).unwrap(), fs::read(c.join("metrics.log")).unwrap());
}

#[test]
fn resume_continues_the_same_log() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let (whole, split) = (dir.path().join("whole"), dir.path().join("split"));
    for run in [&whole, &split] {
        ok(&srl(&["synth-data", "--config", &cfg, "--out", run.to_str().unwrap()]));
    }
    ok(&srl(&["train", "--config", &cfg, "--out", whole.to_str().unwrap()]));
    let short = dir.path().join("short.toml");
    fs::write(&short, TINY.replace("steps = 4", "steps = 2")).unwrap();
    ok(&srl(&["train", "--config", short.to_str().unwrap(), "--out", split.to_str().unwrap()]));
    ok(&srl(&["train", "--config", &cfg, "--out", split.to_str().unwrap(), "--resume"]));
    assert_eq!(fs::read(whole.join("metrics.log")).unwrap(), fs::read(split.join("metrics.log")).unwrap());
    assert_eq!(fs::read(whole.join("ckpt/latest.ckpt")).unwrap(), fs::read(split.join("ckpt/latest.ckpt")).unwrap());
}
