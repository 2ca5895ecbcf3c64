use std::path::Path;
use std::process::{Command, Output};

fn wam4d(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_wam4d"))
        .args(args)
        .env_remove("WAM4D_DATA")
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stdout_json(out: &Output) -> Vec<serde_json::Value> {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect()
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

const TINY: &[&str] = &[
    "--set", "model.width=16",
    "--set", "model.depth=2",
    "--set", "model.depth_blocks=1",
    "--set", "model.heads=2",
    "--set", "model.horizon=1",
    "--set", "model.chunk=4",
    "--set", "model.ffn_mult=2",
    "--set", "train.total_steps=4",
    "--set", "train.warmup_steps=1",
    "--set", "train.batch_size=2",
    "--set", "train.checkpoint_every=2",
    "--set", "eval.t_a_steps=2",
    "--set", "eval.t_o_steps=4",
    "--set", "eval.episodes=2",
    "--set", "eval.recon_episodes=1",
    "--set", "eval.replan=4",
];

#[test]
fn sample_ans_summary() {
    let out = stdout_json(&wam4d(&["sample-ans", "--n", "100000", "--p", "0.5"]));
    let s = &out[0];
    let frac = s["p_clean_actions"].as_f64().unwrap();
    assert!((0.49..=0.51).contains(&frac), "{frac}");
    let ratio = s["branch2_mean_ratio"].as_f64().unwrap();
    assert!((0.59..=0.61).contains(&ratio), "{ratio}");
    assert!(s["min_gap"].as_f64().unwrap() >= 0.0);
    assert_eq!(s["violations"].as_u64(), Some(0));
    assert!(!wam4d(&["sample-ans", "--p", "2"]).status.success());
}

#[test]
fn gen_data_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for d in [&a, &b] {
        let out = stdout_json(&wam4d(&["gen-data", "--n", "4", "--seed", "0", "--out", d.to_str().unwrap()]));
        assert_eq!(out[0]["successes"].as_u64(), Some(4));
    }
    assert_eq!(dir_bytes(&a), dir_bytes(&b));
}

#[test]
fn error_paths_exit_nonzero_with_a_reason() {
    let out = wam4d(&["train", "--config", "missing.cfg"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.cfg"));

    let out = wam4d(&["frobnicate"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).to_lowercase().contains("usage"));

    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.cfg");
    std::fs::write(&cfg, "train.total_steps = 10\ntrain.bogus = 1\n").unwrap();
    let out = wam4d(&["train", "--config", cfg.to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("train.bogus"));

    let out = wam4d(&["train", "--data", tmp.path().join("nowhere").to_str().unwrap(), "--out", tmp.path().join("o").to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("nowhere"));
}

#[test]
fn expert_rollout_always_succeeds() {
    let out = stdout_json(&wam4d(&["rollout", "--expert", "--set", "eval.episodes=4"]));
    assert_eq!(out[0]["report"]["success_rate"].as_f64(), Some(1.0));
}

#[test]
fn pipeline_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    stdout_json(&wam4d(&["gen-data", "--n", "3", "--seed", "1", "--out", data.to_str().unwrap()]));
    let train = |out: &Path, extra: &[&str]| {
        let mut args = vec!["train", "--data", data.to_str().unwrap(), "--out", out.to_str().unwrap()];
        args.extend_from_slice(TINY);
        args.extend_from_slice(extra);
        stdout_json(&wam4d(&args))
    };
    let straight = tmp.path().join("straight");
    train(&straight, &[]);
    let resumed = tmp.path().join("resumed");
    let mid = straight.join("step_000002.xwck");
    train(&resumed, &["--resume", mid.to_str().unwrap()]);
    let a = std::fs::read(straight.join("final.xwck")).unwrap();
    assert_eq!(a, std::fs::read(resumed.join("final.xwck")).unwrap());

    let ck = straight.join("final.xwck");
    let run = |cmd: &str| {
        let mut args = vec![cmd, "--checkpoint", ck.to_str().unwrap()];
        args.extend_from_slice(&TINY[14..]);
        stdout_json(&wam4d(&args))
    };
    for cmd in ["rollout", "eval-4d"] {
        let first = run(cmd);
        assert!(!first.is_empty());
        assert_eq!(first, run(cmd));
    }
}
