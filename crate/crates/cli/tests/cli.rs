use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use latent_programmer::taskgen::read_dataset;

fn lp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lp")).args(args).env("LP_LOG", "warn").output().expect("run lp")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn gen(dir: &Path, name: &str, dialect: &str, n: usize, seed: u64) -> PathBuf {
    let out = dir.join(name);
    let o = lp(&["gen-data", "--dialect", dialect, "--n-tasks", &n.to_string(), "--seed", &seed.to_string(), "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    out
}

fn write_config(dir: &Path, name: &str, json: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, json).unwrap();
    p
}

const TINY: &str = r#"{"steps": 4, "batch_size": 4, "warmup": 2, "pretrain_steps": 1, "eval_every": 0, "eval_tasks": 3,
  "eval_beam": 2, "eval_latent_beams": 1,
  "model": {"dialect": "toy", "embed_dim": 8, "hidden": 8, "layers": 1, "heads": 2, "compression": 1, "codes": 4}}"#;

#[test]
fn gen_data_is_byte_stable() {
    let dir = tempfile::tempdir().unwrap();
    let a = gen(dir.path(), "a.jsonl", "toy", 100, 7);
    let b = gen(dir.path(), "b.jsonl", "toy", 100, 7);
    let bytes = std::fs::read(&a).unwrap();
    assert_eq!(bytes, std::fs::read(&b).unwrap());
    assert_eq!(bytes.iter().filter(|&&c| c == b'\n').count(), 100);
    assert_eq!(read_dataset(&a).unwrap().len(), 100);
    let o = lp(&["gen-data", "--dialect", "toy", "--n-tasks", "5", "--seed", "7", "--out", s(&dir.path().join("c.jsonl"))]);
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("wrote 5 tasks") && stdout.contains("expressions:"), "{stdout}");
}

#[test]
fn gen_data_flag_errors_and_empty_output() {
    let dir = tempfile::tempdir().unwrap();
    let o = lp(&["gen-data", "--dialect", "toy", "--n-tasks", "3", "--seed", "1"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
    let o = lp(&["gen-data", "--dialect", "toy", "--n-tasks", "3", "--seed", "1", "--out", "x", "--max-expressions", "11"]);
    assert_eq!(code(&o), 2);
    let o = lp(&["gen-data", "--dialect", "klingon", "--n-tasks", "3", "--seed", "1", "--out", "x"]);
    assert_eq!(code(&o), 2);
    let empty = gen(dir.path(), "empty.jsonl", "full", 0, 1);
    assert_eq!(std::fs::read(&empty).unwrap().len(), 0);
}

#[test]
fn train_resume_and_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let data = gen(d, "train.jsonl", "toy", 12, 1);
    let held = gen(d, "eval.jsonl", "toy", 3, 2);
    let cfg = write_config(d, "cfg.json", TINY);
    let ckpt = d.join("model.lpck");
    let o = lp(&["train", "--config", s(&cfg), "--data", s(&data), "--eval", s(&held), "--out", s(&ckpt)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(ckpt.exists());
    let metrics = std::fs::read_to_string(d.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 5);
    let before = std::fs::read(&ckpt).unwrap();

    let o = lp(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&ckpt), "--resume"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).contains("nothing to do"));
    assert_eq!(std::fs::read(&ckpt).unwrap(), before);
    assert_eq!(std::fs::read_to_string(d.join("metrics.csv")).unwrap(), metrics);

    let full = gen(d, "full.jsonl", "full", 12, 3);
    let o = lp(&["train", "--config", s(&cfg), "--data", s(&full), "--out", s(&d.join("other.lpck"))]);
    assert_eq!(code(&o), 4, "{}", String::from_utf8_lossy(&o.stderr));
    let bad = write_config(d, "bad.json", r#"{"steps": 2, "pretrain_steps": 5}"#);
    let o = lp(&["train", "--config", s(&bad), "--data", s(&data), "--out", s(&d.join("bad.lpck"))]);
    assert_eq!(code(&o), 4);
}

#[test]
fn synth_and_eval_commands() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let data = gen(d, "train.jsonl", "toy", 12, 1);
    let cfg = write_config(d, "cfg.json", TINY);
    let ckpt = d.join("m.lpck");
    assert_eq!(code(&lp(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&ckpt)])), 0);

    let line = std::fs::read_to_string(&data).unwrap().lines().next().unwrap().to_string();
    let task = d.join("task.json");
    std::fs::write(&task, &line).unwrap();
    let o = lp(&["synth", "--ckpt", s(&ckpt), "--task", s(&task), "--beam", "2", "--latent-beams", "3"]);
    assert_eq!(code(&o), 2);
    let o = lp(&["synth", "--ckpt", s(&ckpt), "--task", s(&task), "--beam", "4", "--latent-beams", "2", "--show-latents"]);
    let c = code(&o);
    assert!(c == 0 || c == 5, "{}", String::from_utf8_lossy(&o.stderr));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.is_empty() || stdout.contains("latent: TOK_"), "{stdout}");
    let again = lp(&["synth", "--ckpt", s(&ckpt), "--task", s(&task), "--beam", "4", "--latent-beams", "2", "--show-latents"]);
    assert_eq!(again.stdout, o.stdout);

    let reports = d.join("reports");
    let o = lp(&[
        "eval", "--ckpt", s(&ckpt), "--data", s(&data), "--beam", "4", "--latent-beams", "2",
        "--report", "accuracy,lengths,diversity,cooccurrence", "--out-dir", s(&reports), "--workers", "2",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let acc = std::fs::read_to_string(reports.join("accuracy.csv")).unwrap();
    assert!(acc.starts_with("solved,total,estimate,low,high"), "{acc}");
    for f in ["lengths.csv", "diversity.csv", "cooccurrence.csv"] {
        assert!(reports.join(f).exists(), "{f}");
    }
    let o = lp(&["eval", "--ckpt", s(&ckpt), "--data", s(&data), "--report", "accuracy,vibes"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn full_dialect_cooccurrence_warns() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let data = gen(d, "full.jsonl", "full", 6, 4);
    let cfg = write_config(d, "cfg.json", &TINY.replace(r#""dialect": "toy""#, r#""dialect": "full""#).replace(r#""steps": 4"#, r#""steps": 2"#));
    let ckpt = d.join("f.lpck");
    assert_eq!(code(&lp(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&ckpt)])), 0);
    let o = lp(&[
        "eval", "--ckpt", s(&ckpt), "--data", s(&data), "--beam", "2", "--latent-beams", "1", "--report", "cooccurrence",
        "--out-dir", s(d),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("harder to interpret"));
}

#[test]
fn trained_model_solves_a_training_task() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let data = gen(d, "train.jsonl", "toy", 8, 5);
    let cfg = write_config(
        d,
        "cfg.json",
        r#"{"steps": 300, "batch_size": 8, "warmup": 50, "pretrain_steps": 30, "eval_every": 0,
  "model": {"dialect": "toy", "embed_dim": 32, "hidden": 64, "layers": 1, "heads": 2, "compression": 1, "codes": 4,
            "vq": {"beta": 0.008}}}"#,
    );
    let ckpt = d.join("m.lpck");
    let o = lp(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&ckpt)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let line = std::fs::read_to_string(&data).unwrap().lines().next().unwrap().to_string();
    let task = d.join("task.json");
    std::fs::write(&task, &line).unwrap();
    let o = lp(&["synth", "--ckpt", s(&ckpt), "--task", s(&task), "--beam", "10", "--latent-beams", "3", "--show-latents"]);
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert_eq!(code(&o), 0, "{stdout}{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout.lines().any(|l| l.starts_with('*')) && stdout.contains("consistent: "), "{stdout}");
    let single = lp(&["synth", "--ckpt", s(&ckpt), "--task", s(&task), "--beam", "10", "--latent-beams", "1"]);
    assert!(code(&single) == 0 || code(&single) == 5);
}
