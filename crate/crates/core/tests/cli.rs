use std::path::Path;
use std::process::Command;

const TINY: &str = r#"{
  "data": {"episodes_per_task": 6, "mixed_episodes": 8, "ep_len": 80},
  "model": {"hidden_dim": 16, "train_context_len": 16},
  "train": {"n_steps": 6, "batch_size": 4, "eval_every": 3, "checkpoint_every": 3, "holdout_windows": 4, "eval_holdout_fraction": 0.2},
  "baseline": {"hidden_dim": 16, "context_len": 16, "mlp_hidden": 16},
  "rl": {"eval_every": 3, "eval_episodes": 1, "eval_horizon": 10, "batch_size": 4},
  "single_goal": {"n_queries": 5},
  "multi_goal": {"n_queries": 2, "offset_max": 30, "slack": 2}
}"#;

fn run(dir: &Path, args: &[&str]) -> std::process::Output {
    let out = Command::new(env!("CARGO_BIN_EXE_maskdp"))
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .unwrap();
    out
}

fn ok(dir: &Path, args: &[&str]) {
    let out = run(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn pipeline(dir: &Path) {
    std::fs::write(dir.join("tiny.json"), TINY).unwrap();
    let c = ["--config", "tiny.json"];
    let with = |args: &[&'static str]| -> Vec<&'static str> { args.iter().copied().chain(c).collect() };
    ok(dir, &with(&["collect", "--env", "pointmass", "--recipe", "near-expert", "--out", "train.bin"]));
    ok(dir, &with(&["collect", "--env", "pointmass", "--recipe", "near-expert", "--seed", "5", "--out", "val.bin"]));
    ok(dir, &with(&["collect", "--env", "pointmass", "--recipe", "near-expert", "--task", "run_west", "--seed", "5", "--out", "west.bin"]));
    ok(dir, &with(&["collect", "--env", "pointmass", "--recipe", "mixed", "--out", "mixed.bin"]));
    ok(dir, &with(&["pretrain", "--data", "train.bin", "--out", "model"]));
    ok(dir, &with(&["train-baseline", "--kind", "goal_gpt", "--data", "train.bin", "--out", "ggpt"]));
    ok(dir, &with(&["eval-goal", "--data", "val.bin", "--ckpt", "model/final.ckpt", "--baseline", "ggpt/final.ckpt", "--random", "--out", "goal.csv"]));
    ok(dir, &with(&["eval-multigoal", "--data", "val.bin", "--ckpt", "model/final.ckpt", "--out", "multi.csv"]));
    ok(dir, &with(&["prompt", "--data", "west.bin", "--task", "run_west", "--ckpt", "model/final.ckpt", "--n", "2", "--horizon", "40", "--out", "prompt.csv"]));
    ok(dir, &with(&["finetune-rl", "--data", "mixed.bin", "--task", "run_east", "--ckpt", "model/final.ckpt", "--steps", "6", "--out", "rl.csv"]));
    ok(dir, &with(&["ablate", "--kind", "horizon", "--val", "west.bin", "--task", "run_west", "--ckpt", "model/final.ckpt", "--n", "1", "--out", "horizon.csv"]));
}

const OUTPUTS: [&str; 6] = ["goal.csv", "multi.csv", "prompt.csv", "rl.csv", "horizon.csv", "model/final.ckpt"];

#[test]
fn pipeline_reruns_are_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    pipeline(a.path());
    pipeline(b.path());
    for f in OUTPUTS {
        let x = std::fs::read(a.path().join(f)).unwrap();
        assert!(!x.is_empty(), "{f} is empty");
        assert_eq!(x, std::fs::read(b.path().join(f)).unwrap(), "{f} differs between reruns");
    }
    let goal = std::fs::read_to_string(a.path().join("goal.csv")).unwrap();
    let mut lines = goal.lines();
    assert_eq!(
        lines.next().unwrap(),
        "method,env,task,seed,query_id,goal_index,mode,foresight,metric_name,metric_value,ckpt_step"
    );
    // Open and closed MaskDP, goal_gpt and random, five queries each.
    assert_eq!(lines.count(), 20);
    let horizon = std::fs::read_to_string(a.path().join("horizon.csv")).unwrap();
    assert!(horizon.contains("return_h60"));
}

#[test]
fn unknown_config_fields_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.json"), r#"{"train": {"learning_rate": 0.1}}"#).unwrap();
    let out = run(dir.path(), &["collect", "--env", "pointmass", "--recipe", "random", "--config", "bad.json", "--out", "d.bin"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("train.learning_rate"));
    std::fs::write(dir.path().join("bad.json"), r#"{"optimizer": {}}"#).unwrap();
    let out = run(dir.path(), &["collect", "--env", "pointmass", "--recipe", "random", "--config", "bad.json", "--out", "d.bin"]);
    assert!(!out.status.success());
}

#[test]
fn gpt_cannot_reach_goals() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    std::fs::write(p.join("tiny.json"), TINY).unwrap();
    ok(p, &["collect", "--env", "pointmass", "--recipe", "near-expert", "--config", "tiny.json", "--out", "d.bin"]);
    ok(p, &["train-baseline", "--kind", "gpt", "--data", "d.bin", "--config", "tiny.json", "--out", "gpt"]);
    let out = run(p, &["eval-goal", "--data", "d.bin", "--baseline", "gpt/final.ckpt", "--config", "tiny.json", "--out", "g.csv"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("not goal-conditioned"));
}

#[test]
fn mismatched_checkpoint_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    std::fs::write(p.join("tiny.json"), TINY).unwrap();
    ok(p, &["collect", "--env", "pendulum", "--recipe", "near-expert", "--config", "tiny.json", "--out", "pend.bin"]);
    ok(p, &["collect", "--env", "pointmass", "--recipe", "near-expert", "--config", "tiny.json", "--out", "pm.bin"]);
    ok(p, &["pretrain", "--data", "pend.bin", "--config", "tiny.json", "--out", "m"]);
    let out = run(p, &["eval-goal", "--data", "pm.bin", "--ckpt", "m/final.ckpt", "--config", "tiny.json", "--out", "g.csv"]);
    assert!(!out.status.success());
}
