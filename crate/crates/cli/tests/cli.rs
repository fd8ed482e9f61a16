use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use lvlm_core::datasets::io::read_mcq;
use lvlm_core::params::ParamGroup;
use lvlm_core::pipeline::checkpoint::Checkpoint;
use lvlm_core::pipeline::metrics::read_metrics;
use lvlm_core::ModelConfig;

const BIN: &str = env!("CARGO_BIN_EXE_lvlm");

const BASE: &str = r#"
seed = 11
model = "micro"
train_size = 24
validation_size = 8
steps = 6
checkpoint_every = 3
pretrain_steps = 12
pretrain_batch = 2
pretrain_warmup = 2
episodes = 2
max_steps = 4
events = 6
max_answer_tokens = 3
train_path = "data/train.jsonl"
validation_path = "data/validation.jsonl"
backbone_path = "pre/backbone.ckpt"
"#;

fn lvlm(args: &[&str]) -> (i32, String) {
    let out = Command::new(BIN).args(args).output().unwrap();
    (out.status.code().unwrap_or(-1), String::from_utf8_lossy(&out.stderr).into_owned())
}

fn write_config(dir: &Path, extra: &str) -> PathBuf {
    let key = |l: &str| l.split('=').next().unwrap_or("").trim().to_string();
    let replaced: Vec<String> = extra.lines().map(key).collect();
    let base: String = BASE.lines().filter(|l| !replaced.contains(&key(l))).map(|l| format!("{l}\n")).collect();
    let p = dir.join("run.toml");
    fs::write(&p, format!("{base}{extra}")).unwrap();
    p
}

fn ok(args: &[&str]) {
    let (code, err) = lvlm(args);
    assert_eq!(code, 0, "{args:?}: {err}");
}

/// A directory with generated data and a pretrained micro backbone.
fn prepared(extra: &str) -> (tempfile::TempDir, String) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), extra).display().to_string();
    let d = dir.path().display().to_string();
    ok(&["datagen", "--config", &cfg, "--out", &format!("{d}/data")]);
    ok(&["pretrain", "--config", &cfg, "--out", &format!("{d}/pre")]);
    (dir, cfg)
}

fn listing(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(listing(&p));
        } else {
            out.push((p.clone(), fs::read(&p).unwrap()));
        }
    }
    out.sort();
    out
}

#[test]
fn missing_dataset_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "").display().to_string();
    let (code, err) = lvlm(&["pretrain", "--config", &cfg, "--out", &dir.path().join("o").display().to_string()]);
    assert_eq!(code, 2, "{err}");
    assert!(err.contains("train_path"));
}

#[test]
fn unknown_config_key_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "warmup_ratio = 0.1\n").display().to_string();
    let (code, err) = lvlm(&["gradcheck", "--config", &cfg, "--out", "unused"]);
    assert_eq!(code, 2);
    assert!(err.contains("warmup_ratio"));
}

#[test]
fn missing_seed_and_bad_flags_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().display().to_string();
    assert_eq!(lvlm(&["gradcheck", "--out", &out]).0, 2);
    assert_eq!(lvlm(&["frobnicate"]).0, 2);
    assert_eq!(lvlm(&["eval", "--seed", "1", "--out", &out, "--benchmark", "chess"]).0, 2);
    assert_eq!(lvlm(&["train", "--seed", "1", "--out", &out, "--variant", "bogus"]).0, 2);
}

#[test]
fn gradcheck_passes_and_reports() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().display().to_string();
    ok(&["gradcheck", "--seed", "0", "--out", &out]);
    let report: serde_json::Value = serde_json::from_slice(&fs::read(dir.path().join("gradcheck.json")).unwrap()).unwrap();
    assert!(report["f32"]["max_rel_error"].as_f64().unwrap() < 1e-3);
    assert!(report["f64"]["max_rel_error"].as_f64().unwrap() < 1e-5);
}

#[test]
fn datagen_writes_the_mcq_benchmark() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "").display().to_string();
    let out = dir.path().join("g");
    ok(&["datagen", "--config", &cfg, "--out", &out.display().to_string(), "--seed", "4"]);
    for f in ["train.jsonl", "validation.jsonl", "captions.jsonl", "mcq.jsonl"] {
        assert!(out.join(f).is_file(), "{f}");
    }
    let items = read_mcq(std::io::BufReader::new(fs::File::open(out.join("mcq.jsonl")).unwrap())).unwrap();
    assert_eq!(items.len(), 12);
}

#[test]
fn train_keeps_the_backbone_and_writes_checkpoints() {
    let (dir, cfg) = prepared("");
    let out = dir.path().join("run");
    ok(&["train", "--config", &cfg, "--out", &out.display().to_string()]);
    let backbone = Checkpoint::load(&dir.path().join("pre/backbone.ckpt")).unwrap();
    let trained = Checkpoint::load(&out.join("final.ckpt")).unwrap();
    assert!(trained.optimizer.is_some());
    let store = trained.to_store(&ModelConfig::micro(), false).unwrap();
    for id in store.ids() {
        let e = store.entry(id);
        if e.group.is_backbone() {
            assert_eq!(Some(store.get(id)), backbone.tensor(&e.name), "{}", e.name);
        }
    }
    assert!(!store.ids_in(ParamGroup::Reasoner).is_empty());
    assert!(out.join("checkpoints/step_000003.ckpt").is_file());
    assert!(out.join("checkpoints/step_000006.ckpt").is_file());
    let metrics = read_metrics(&out.join("metrics.jsonl")).unwrap();
    let steps: Vec<u64> = metrics.iter().filter(|m| m.benchmark == "train").map(|m| m.step).collect();
    assert_eq!(steps, (1..=6).collect::<Vec<_>>());
    assert!(metrics.iter().any(|m| m.benchmark == "validation"));
}

#[test]
fn sweep_writes_seven_arms_and_a_merge() {
    let (dir, cfg) = prepared("steps = 2\n");
    let out = dir.path().join("sweep");
    ok(&["train", "--config", &cfg, "--out", &out.display().to_string(), "--sweep"]);
    let text = fs::read_to_string(out.join("sweep.jsonl")).unwrap();
    let arms: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(arms.len(), 7);
    assert_eq!(arms[0]["lr"].as_f64(), Some(1e-2));
    assert_eq!(arms[6]["lr"].as_f64(), Some(1e-5));
    for i in 0..7 {
        assert!(out.join(format!("arms/arm_{i}.ckpt")).is_file());
    }
    assert!(out.join("merged.ckpt").is_file());
}

#[test]
fn sweep_without_validation_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "").display().to_string();
    let d = dir.path().display().to_string();
    ok(&["datagen", "--config", &cfg, "--out", &format!("{d}/data")]);
    ok(&["pretrain", "--config", &cfg, "--out", &format!("{d}/pre")]);
    fs::remove_file(dir.path().join("data/validation.jsonl")).unwrap();
    let (code, _) = lvlm(&["train", "--config", &cfg, "--out", &format!("{d}/s"), "--sweep"]);
    assert_eq!(code, 2);
}

#[test]
fn eval_emits_one_record_per_benchmark() {
    let (dir, cfg) = prepared("");
    let out = dir.path().join("eval");
    ok(&["eval", "--config", &cfg, "--out", &out.display().to_string()]);
    let metrics = read_metrics(&out.join("metrics.jsonl")).unwrap();
    let names: Vec<&str> = metrics.iter().map(|m| m.benchmark.as_str()).collect();
    assert_eq!(names, ["navigate", "mcq", "describe"]);
    assert!(out.join("traces/episode_000.jsonl").is_file());
    assert!(out.join("traces/episode_001.jsonl").is_file());

    let single = dir.path().join("eval_mcq");
    ok(&["eval", "--config", &cfg, "--out", &single.display().to_string(), "--benchmark", "mcq"]);
    let m = read_metrics(&single.join("metrics.jsonl")).unwrap();
    assert_eq!(m.len(), 1);
    assert_eq!(m[0].value.to_bits(), metrics[1].value.to_bits());
}

#[test]
fn eval_scores_a_376_item_mcq_file() {
    let (dir, cfg) = prepared("events = 188\ncaptions_path = \"big/captions.jsonl\"\nmcq_path = \"big/mcq.jsonl\"\n");
    let d = dir.path().display().to_string();
    ok(&["datagen", "--config", &cfg, "--out", &format!("{d}/big")]);
    let out = dir.path().join("eval");
    ok(&["eval", "--config", &cfg, "--out", &out.display().to_string(), "--benchmark", "mcq"]);
    let items = read_mcq(std::io::BufReader::new(fs::File::open(dir.path().join("big/mcq.jsonl")).unwrap())).unwrap();
    assert_eq!(items.len(), 376);
    let m = read_metrics(&out.join("metrics.jsonl")).unwrap();
    let correct = m[0].value * 376.0;
    assert!((correct - correct.round()).abs() < 1e-9, "accuracy {} is not a multiple of 1/376", m[0].value);
}

#[test]
fn merge_of_identical_checkpoints_is_bitwise() {
    let (dir, cfg) = prepared("");
    let b = dir.path().join("pre/backbone.ckpt").display().to_string();
    let out = dir.path().join("m");
    ok(&["merge", &b, &b, "--config", &cfg, "--out", &out.display().to_string()]);
    assert_eq!(fs::read(out.join("merged.ckpt")).unwrap(), fs::read(&b).unwrap());
}

#[test]
fn merge_of_different_backbones_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().display().to_string();
    let cfg = write_config(dir.path(), "").display().to_string();
    ok(&["datagen", "--config", &cfg, "--out", &format!("{d}/data")]);
    ok(&["pretrain", "--config", &cfg, "--out", &format!("{d}/p1")]);
    ok(&["pretrain", "--config", &cfg, "--out", &format!("{d}/p2"), "--seed", "12"]);
    let (code, _) = lvlm(&["merge", &format!("{d}/p1/backbone.ckpt"), &format!("{d}/p2/backbone.ckpt"), "--config", &cfg, "--out", &format!("{d}/m")]);
    assert_eq!(code, 1);
}

#[test]
fn repeated_runs_are_bitwise_identical() {
    let (dir, cfg) = prepared("");
    let d = dir.path().display().to_string();
    for run in ["a", "b"] {
        ok(&["pretrain", "--config", &cfg, "--out", &format!("{d}/pre_{run}")]);
        ok(&["train", "--config", &cfg, "--out", &format!("{d}/train_{run}")]);
        ok(&["eval", "--config", &cfg, "--out", &format!("{d}/eval_{run}")]);
    }
    for stage in ["pre", "train", "eval"] {
        let a = listing(&dir.path().join(format!("{stage}_a")));
        let b = listing(&dir.path().join(format!("{stage}_b")));
        assert!(!a.is_empty());
        assert_eq!(a.len(), b.len());
        for ((pa, ca), (_, cb)) in a.iter().zip(&b) {
            assert!(ca == cb, "{} differs", pa.display());
        }
    }
}

#[test]
fn commands_write_only_under_out() {
    let (dir, cfg) = prepared("");
    let before: Vec<_> = listing(dir.path());
    let out = dir.path().join("only_here");
    ok(&["train", "--config", &cfg, "--out", &out.display().to_string()]);
    ok(&["eval", "--config", &cfg, "--out", &out.display().to_string()]);
    let after: Vec<_> = listing(dir.path()).into_iter().filter(|(p, _)| !p.starts_with(&out)).collect();
    assert_eq!(before, after);
}
