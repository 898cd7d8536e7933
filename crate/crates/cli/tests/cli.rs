use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use guidecap::corpus::read_guide_file;

fn guidecap(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_guidecap"))
        .current_dir(dir)
        .env_remove("GUIDECAP_OUT")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = guidecap(dir, args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

const SMALL: &[&str] = &["--n-images", "30", "--feature-dims", "8,8,8,4", "--n-objects", "8", "--n-places", "3"];

fn synth(dir: &Path, out: &str) {
    let mut args = vec!["synth", "--out", out];
    args.extend_from_slice(SMALL);
    ok(dir, &args);
}

/// Synthetic corpus, vocabulary and a briefly trained checkpoint.
fn pipeline(dir: &Path) -> PathBuf {
    synth(dir, "s");
    ok(dir, &["vocab", "--train", "s/train.jsonl", "--size", "120", "--out", "v"]);
    ok(
        dir,
        &[
            "train", "--train", "s/train.jsonl", "--dev", "s/dev.jsonl", "--vocab", "v/vocab.txt", "--out", "t",
            "--d-model", "16", "--layers", "1", "--heads", "2", "--d-ff", "32", "--fc-hidden", "16", "--max-steps",
            "6", "--eval-every", "3", "--batch-size", "8", "--beam-width", "2",
        ],
    );
    dir.join("t")
}

fn read(p: impl AsRef<Path>) -> Vec<u8> {
    fs::read(p.as_ref()).unwrap_or_else(|e| panic!("{}: {e}", p.as_ref().display()))
}

#[test]
fn synth_writes_splits_guides_and_stats() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), "s");
    let s = dir.path().join("s");
    for f in ["train.jsonl", "dev.jsonl", "test.jsonl", "train.features.gten", "test_guides.tsv", "manifest.json"] {
        assert!(s.join(f).exists(), "{f}");
    }
    let csv = String::from_utf8(read(s.join("stats.csv"))).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[0].split(',').count(), lines[1].split(',').count());
    assert!(lines[1].split(',').all(|v| v.parse::<f64>().is_ok()));
    let guides = read_guide_file(&s.join("test_guides.tsv")).unwrap();
    assert!(!guides.is_empty());
    assert!(guides.iter().all(|e| e.guides.len() == 3));
}

#[test]
fn same_seed_gives_identical_files() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), "a");
    synth(dir.path(), "b");
    for f in ["train.jsonl", "train.features.gten", "test.jsonl", "test_guides.tsv", "stats.csv"] {
        assert_eq!(read(dir.path().join("a").join(f)), read(dir.path().join("b").join(f)), "{f}");
    }
}

#[test]
fn refuses_a_non_empty_output_without_force() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), "s");
    let mut args = vec!["synth", "--out", "s"];
    args.extend_from_slice(SMALL);
    let out = guidecap(dir.path(), &args);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("--force"));
    args.push("--force");
    ok(dir.path(), &args);
}

#[test]
fn usage_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&guidecap(dir.path(), &["train", "--bogus"])), 1);
    assert_eq!(code(&guidecap(dir.path(), &["synth", "--out", "x", "--split", "0.5,0.5"])), 1);
    assert_eq!(code(&guidecap(dir.path(), &["--help"])), 0);
}

#[test]
fn unknown_ablation_lists_the_valid_names() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), "s");
    ok(dir.path(), &["vocab", "--train", "s/train.jsonl", "--size", "120", "--out", "v"]);
    let out = guidecap(dir.path(), &["train", "--train", "s/train.jsonl", "--vocab", "v/vocab.txt", "--ablation", "T+X"]);
    assert_eq!(code(&out), 1);
    let err = String::from_utf8_lossy(&out.stderr);
    for name in ["T+G+R_GR+R_FRCNN", "T+G+R_FRCNN", "copy"] {
        assert!(err.contains(name), "{err}");
    }
}

#[test]
fn missing_input_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = guidecap(dir.path(), &["stats", "--data", "nope.jsonl", "--out", "st"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn divergence_exits_with_three() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), "s");
    ok(dir.path(), &["vocab", "--train", "s/train.jsonl", "--size", "120", "--out", "v"]);
    let out = guidecap(
        dir.path(),
        &["train", "--train", "s/train.jsonl", "--vocab", "v/vocab.txt", "--out", "t", "--lr", "1e30", "--max-steps", "5"],
    );
    assert_eq!(code(&out), 3);
    assert!(String::from_utf8_lossy(&out.stderr).contains("step"));
    assert!(dir.path().join("t/log.csv").exists());
}

#[test]
fn checkpoint_vocab_mismatch_names_the_parameter() {
    let dir = tempfile::tempdir().unwrap();
    pipeline(dir.path());
    ok(dir.path(), &["vocab", "--train", "s/train.jsonl", "--size", "100", "--out", "v2"]);
    let out = guidecap(
        dir.path(),
        &["decode", "--data", "s/dev.jsonl", "--vocab", "v2/vocab.txt", "--checkpoint", "t/best.ckpt", "--out", "d"],
    );
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("embed.tokens"));
}

#[test]
fn decode_and_eval_produce_comparison_tables() {
    let dir = tempfile::tempdir().unwrap();
    pipeline(dir.path());
    let d = dir.path();
    ok(d, &["decode", "--data", "s/test.jsonl", "--vocab", "v/vocab.txt", "--checkpoint", "t/best.ckpt", "--guides", "s/test_guides.tsv", "--out", "dm"]);
    ok(d, &["decode", "--data", "s/test.jsonl", "--vocab", "v/vocab.txt", "--ablation", "copy", "--out", "dc"]);
    let rows = String::from_utf8(read(d.join("dm/decodes.jsonl"))).unwrap();
    let first: serde_json::Value = serde_json::from_str(rows.lines().next().unwrap()).unwrap();
    for key in ["image_id", "guiding_text", "caption", "score"] {
        assert!(first.get(key).is_some(), "{key}");
    }
    let md = ok(d, &["eval", "--system", "copy=dc/eval.jsonl", "--system", "model=dm/eval.jsonl", "--out", "e"]);
    assert!(md.contains("| copy |") && md.contains("| model |"));
    let csv = String::from_utf8(read(d.join("e/report.csv"))).unwrap();
    assert_eq!(csv.lines().count(), 3);
}

#[test]
fn eval_of_references_against_themselves_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let inst = [
        r#"{"image_id":"1","guiding_text":"dog","candidate":"a dog on the grass","references":["a dog on the grass"]}"#,
        r#"{"image_id":"2","guiding_text":"car","candidate":"a red car near a tree","references":["a red car near a tree"]}"#,
    ];
    fs::write(dir.path().join("gold.jsonl"), inst.join("\n") + "\n").unwrap();
    ok(dir.path(), &["eval", "--system", "gold=gold.jsonl", "--out", "e"]);
    let csv = String::from_utf8(read(dir.path().join("e/report.csv"))).unwrap();
    let row: Vec<&str> = csv.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(row[0], "gold");
    assert_eq!(row[1].parse::<f64>().unwrap(), 10.0);
    assert_eq!(row[2].parse::<f64>().unwrap(), 1.0);
}

#[test]
fn stats_entropy_matches_the_composition() {
    let dir = tempfile::tempdir().unwrap();
    // 8 images x 2 guides over 4 objects in equal shares: uniform, 2 bits
    synth(dir.path(), "s");
    let tuples = guidecap::corpus::load_tuples(&dir.path().join("s/train.jsonl")).unwrap();
    let objects = ["dog", "cat", "car", "tree"];
    let fixed: Vec<_> = tuples
        .iter()
        .take(8)
        .enumerate()
        .map(|(i, t)| guidecap::corpus::TrainingTuple {
            guiding_text: objects[i % 4].into(),
            caption: format!("a {}", objects[i % 4]),
            ..t.clone()
        })
        .collect();
    guidecap::corpus::save_tuples(&fixed, &dir.path().join("fixed.jsonl")).unwrap();
    ok(dir.path(), &["stats", "--data", "fixed.jsonl", "--out", "st"]);
    let csv = String::from_utf8(read(dir.path().join("st/stats.csv"))).unwrap();
    let entropy: f64 = csv.lines().nth(1).unwrap().rsplit(',').next().unwrap().parse().unwrap();
    assert_eq!(entropy, 2.0);
}

#[test]
fn config_file_sits_between_defaults_and_flags() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d, "s");
    ok(d, &["vocab", "--train", "s/train.jsonl", "--size", "120", "--out", "v"]);
    fs::write(
        d.join("run.toml"),
        "[model]\nd_model = 16\nn_layers = 1\nn_heads = 2\nd_ff = 16\nfc_hidden = 8\n\n[train]\nlearning_rate = 0.05\nbatch_size = 4\nmax_steps = 2\n",
    )
    .unwrap();
    let base = ["train", "--train", "s/train.jsonl", "--vocab", "v/vocab.txt", "--config", "run.toml"];
    ok(d, &[&base[..], &["--out", "a"]].concat());
    ok(d, &[&base[..], &["--out", "b", "--lr", "0.07"]].concat());
    let cfg = |run: &str| -> serde_json::Value {
        serde_json::from_slice::<serde_json::Value>(&read(d.join(run).join("manifest.json"))).unwrap()["config"].clone()
    };
    assert_eq!(cfg("a")["train"]["learning_rate"], 0.05);
    assert_eq!(cfg("b")["train"]["learning_rate"], 0.07);
    assert_eq!(cfg("a")["train"]["batch_size"], 4);
    assert_eq!(cfg("a")["train"]["eval_every_steps"], 500);
    assert_eq!(cfg("a")["model"]["d_model"], 16);
    let bad = guidecap(d, &["train", "--train", "s/train.jsonl", "--vocab", "v/vocab.txt", "--config", "v/vocab.txt"]);
    assert_eq!(code(&bad), 1);
}

#[test]
fn output_root_comes_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["synth"];
    args.extend_from_slice(SMALL);
    let out = Command::new(env!("CARGO_BIN_EXE_guidecap"))
        .current_dir(dir.path())
        .env("GUIDECAP_OUT", dir.path().join("root"))
        .args(&args)
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(dir.path().join("root/synth/train.jsonl").exists());
}

#[test]
fn replaying_a_manifest_reproduces_the_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let t = pipeline(dir.path());
    let before: Vec<Vec<u8>> = ["best.ckpt", "final.ckpt", "log.csv"].iter().map(|f| read(t.join(f))).collect();
    ok(dir.path(), &["replay", "t/manifest.json", "--out", "r"]);
    let after: Vec<Vec<u8>> = ["best.ckpt", "final.ckpt", "log.csv"].iter().map(|f| read(dir.path().join("r").join(f))).collect();
    assert_eq!(before, after);
    let m: serde_json::Value = serde_json::from_slice(&read(t.join("manifest.json"))).unwrap();
    assert_eq!(m["command"], "train");
    assert!(m["inputs"].as_object().unwrap().keys().any(|k| k.ends_with("train.features.gten")));
}
