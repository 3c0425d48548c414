use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use pixflow::cli::{run_checks, CheckOptions, RunConfig, CHECKS};
use pixflow::data::{load_checkpoint, load_dataset};
use tempfile::tempdir;

const TINY: &str = r#"
[model]
hidden_dim = 16
depth = 1
heads = 2
num_classes = 4
max_resolution = 16
mlp_ratio = 2
freq_dim = 8

[schedule]
stages = 2
target_resolution = 16

[data]
count = 4
seed = 3

[train]
batch_size = 4
total_steps = 3
checkpoint_every = 2
lr = 1e-3

[sample]
steps_per_stage = 3
seed = 5

[output]
dir = "out"
"#;

fn pixflow(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pixflow")).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(code(&pixflow(&[])), 2);
    assert_eq!(code(&pixflow(&["fly"])), 2);
    assert_eq!(code(&pixflow(&["train"])), 2);
    assert_eq!(code(&pixflow(&["--help"])), 0);

    let dir = tempdir().unwrap();
    let bad = write_config(dir.path(), "bad.toml", "[model]\nwidth = 4\n");
    let o = pixflow(&["check", "--config", s(&bad)]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("width"));
    assert_eq!(code(&pixflow(&["check", "--config", s(&dir.path().join("missing.toml"))])), 2);
}

#[test]
fn check_reports_every_check_once() {
    let dir = tempdir().unwrap();
    let cfg = write_config(dir.path(), "run.toml", TINY);
    let o = pixflow(&["check", "--config", s(&cfg)]);
    let out = String::from_utf8_lossy(&o.stdout);
    assert_eq!(code(&o), 0, "{out}");
    for (name, _) in CHECKS {
        let hits = out.lines().filter(|l| l.split_whitespace().nth(1) == Some(name)).count();
        assert_eq!(hits, 1, "{name} in\n{out}");
    }
    assert!(out.lines().all(|l| l.starts_with("PASS") || l.contains("checks, 0 failed")));
}

#[test]
fn negated_gradients_fail_the_gradient_checks() {
    let cfg = RunConfig::parse(TINY, Path::new(".")).unwrap();
    let outcomes = run_checks(&cfg, &CheckOptions { negate_gradient: true, seed: 0 });
    for o in &outcomes {
        assert_eq!(o.passed, !o.name.starts_with("gradient."), "{o:?}");
    }
}

#[test]
fn gen_data_writes_loadable_dataset() {
    let dir = tempdir().unwrap();
    let cfg = write_config(dir.path(), "run.toml", TINY);
    let out = dir.path().join("shapes.pxfd");
    assert_eq!(code(&pixflow(&["gen-data", "--config", s(&cfg), "--out", s(&out)])), 0);
    let ds = load_dataset(&out).unwrap();
    assert_eq!(ds.len(), 4);
    assert_eq!(ds.dims(), Some((3, 16, 16)));
}

#[test]
fn train_then_sample() {
    let dir = tempdir().unwrap();
    let cfg = write_config(dir.path(), "run.toml", TINY);
    let o = pixflow(&["train", "--config", s(&cfg)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));

    let run = dir.path().join("out");
    let log = std::fs::read_to_string(run.join("loss.csv")).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines[0], "step,loss,stage_mix");
    assert_eq!(lines.len(), 4);
    for (i, l) in lines[1..].iter().enumerate() {
        let f: Vec<&str> = l.split(',').collect();
        assert_eq!(f[0], (i + 1).to_string());
        assert!(f[1].parse::<f64>().unwrap().is_finite());
        let mix: usize = f[2].split('|').map(|n| n.parse::<usize>().unwrap()).sum();
        assert_eq!(mix, 4);
    }
    assert!(run.join("step000002.pxfc").exists());
    let final_ck = run.join("final.pxfc");
    assert_eq!(load_checkpoint(&final_ck).unwrap().step, 3);

    // Same seed, same log.
    let again = tempdir().unwrap();
    let cfg2 = write_config(again.path(), "run.toml", TINY);
    assert_eq!(code(&pixflow(&["train", "--config", s(&cfg2)])), 0);
    assert_eq!(std::fs::read_to_string(again.path().join("out/loss.csv")).unwrap(), log);

    let none = dir.path().join("none");
    let o = pixflow(&["sample", "--config", s(&cfg), "--ckpt", s(&final_ck), "--class", "1", "--count", "0", "--out", s(&none)]);
    assert_eq!(code(&o), 0);
    assert_eq!(std::fs::read_dir(&none).map(|d| d.count()).unwrap_or(0), 0);

    let imgs = dir.path().join("imgs");
    let args = ["sample", "--config", s(&cfg), "--ckpt", s(&final_ck), "--class", "1", "--count", "2", "--out", s(&imgs)];
    assert_eq!(code(&pixflow(&args)), 0);
    let a = std::fs::read(imgs.join("class1_seed5.ppm")).unwrap();
    let b = std::fs::read(imgs.join("class1_seed6.ppm")).unwrap();
    assert!(a.starts_with(b"P6\n16 16\n255\n"));
    assert_eq!(a.len(), b"P6\n16 16\n255\n".len() + 3 * 256);
    assert_ne!(a, b);
    assert_eq!(code(&pixflow(&args)), 0);
    assert_eq!(std::fs::read(imgs.join("class1_seed5.ppm")).unwrap(), a);

    let o = pixflow(&["sample", "--config", s(&cfg), "--ckpt", s(&final_ck), "--class", "9", "--count", "1", "--out", s(&imgs)]);
    assert_eq!(code(&o), 2);
    let o = pixflow(&["sample", "--config", s(&cfg), "--ckpt", s(&dir.path().join("nope.pxfc")), "--class", "0", "--count", "1", "--out", s(&imgs)]);
    assert_eq!(code(&o), 3);

    // A checkpoint from a different schedule is refused.
    let single = write_config(dir.path(), "single.toml", &TINY.replace("stages = 2", "stages = 1"));
    let o = pixflow(&["sample", "--config", s(&single), "--ckpt", s(&final_ck), "--class", "0", "--count", "1", "--out", s(&imgs)]);
    assert_eq!(code(&o), 2);
}

#[test]
fn single_and_multi_stage_runs_give_target_resolution_images() {
    for stages in [1, 3] {
        let dir = tempdir().unwrap();
        let text = TINY.replace("stages = 2", &format!("stages = {stages}")).replace("total_steps = 3", "total_steps = 1");
        let cfg = write_config(dir.path(), "run.toml", &text);
        assert_eq!(code(&pixflow(&["train", "--config", s(&cfg)])), 0);
        let ck = dir.path().join("out/final.pxfc");
        let imgs = dir.path().join("imgs");
        let o = pixflow(&["sample", "--config", s(&cfg), "--ckpt", s(&ck), "--class", "0", "--count", "1", "--out", s(&imgs)]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        assert!(std::fs::read(imgs.join("class0_seed5.ppm")).unwrap().starts_with(b"P6\n16 16\n255\n"));
    }
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let straight = tempdir().unwrap();
    let cfg = write_config(straight.path(), "run.toml", &TINY.replace("total_steps = 3", "total_steps = 4"));
    assert_eq!(code(&pixflow(&["train", "--config", s(&cfg)])), 0);

    let split = tempdir().unwrap();
    let first = write_config(split.path(), "a.toml", &TINY.replace("total_steps = 3", "total_steps = 2"));
    assert_eq!(code(&pixflow(&["train", "--config", s(&first)])), 0);
    let resume = TINY.replace("total_steps = 3", "total_steps = 4").replace("dir = \"out\"", "dir = \"out\"\nresume = \"out/final.pxfc\"");
    let second = write_config(split.path(), "b.toml", &resume);
    let o = pixflow(&["train", "--config", s(&second)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));

    let read = |d: &Path, f: &str| std::fs::read(d.join("out").join(f)).unwrap();
    assert_eq!(read(split.path(), "final.pxfc"), read(straight.path(), "final.pxfc"));
    assert_eq!(read(split.path(), "loss.csv"), read(straight.path(), "loss.csv"));
}

#[test]
fn divergence_aborts_with_diagnostic_checkpoint() {
    let dir = tempdir().unwrap();
    let cfg = write_config(dir.path(), "run.toml", &TINY.replace("lr = 1e-3", "lr = 1e300"));
    let o = pixflow(&["train", "--config", s(&cfg)]);
    assert_eq!(code(&o), 3);
    assert!(String::from_utf8_lossy(&o.stderr).contains("non-finite"));
    let diag = load_checkpoint(dir.path().join("out/diagnostic.pxfc")).unwrap();
    assert!(diag.step >= 1);
    assert!(diag.params.all_finite());
    assert!(!dir.path().join("out/final.pxfc").exists());
}
