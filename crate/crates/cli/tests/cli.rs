use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
seed = 3
eval_every = 200
eval_episodes = 2
checkpoints = true

[schedule]
procedural = false

[[schedule.tasks]]
kind = "OpenRoom"
size = 7
seed = 1
budget = 400

[[schedule.tasks]]
kind = "Crossing"
size = 7
seed = 2
budget = 400

[replay]
capacity = 2000
min_store_length = 4
insertion = "reservoir"

[model]
hidden = 8

[agent]
hidden = 8
"#;

fn crl(args: &[&str], out: Option<&Path>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_crl"));
    cmd.args(args).env("RUST_LOG", "error").env_remove("CRL_OUT_DIR");
    if let Some(dir) = out {
        cmd.env("CRL_OUT_DIR", dir);
    }
    cmd.output().expect("binary runs")
}

#[test]
fn run_then_recompute_metrics_and_inspect_the_buffer() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("tiny.toml");
    fs::write(&config, TINY).unwrap();
    let out = dir.path().join("run");
    let run = crl(&["run", "--config", config.to_str().unwrap()], Some(&out));
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    let printed: serde_json::Value = serde_json::from_slice(&run.stdout).unwrap();
    for file in ["eval_log.csv", "config.toml", "run_summary.json", "checkpoints/task1_buffer.bin"] {
        assert!(out.join(file).exists(), "{file} missing");
    }

    let log = out.join("eval_log.csv");
    let metrics = crl(&["metrics", "--log", log.to_str().unwrap()], None);
    assert!(metrics.status.success());
    let recomputed: serde_json::Value = serde_json::from_slice(&metrics.stdout).unwrap();
    assert_eq!(printed, recomputed);

    let buffer = out.join("checkpoints/task1_buffer.bin");
    let inspect = crl(&["inspect-buffer", "--buffer", buffer.to_str().unwrap(), "--task-starts", "400"], None);
    assert!(inspect.status.success());
    let text = String::from_utf8(inspect.stdout).unwrap();
    assert!(text.contains("task 0:") && text.contains("task 1:"), "{text}");
}

#[test]
fn config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("bad.toml");
    fs::write(&config, TINY.replace("capacity = 2000", "capacity = 0")).unwrap();
    let out = crl(&["run", "--config", config.to_str().unwrap()], None);
    assert_eq!(out.status.code(), Some(2));
    let missing = crl(&["run", "--config", dir.path().join("nope.toml").to_str().unwrap()], None);
    assert!(!missing.status.success());
}

#[test]
fn unsorted_task_starts_are_rejected() {
    let out = crl(&["inspect-buffer", "--buffer", "x.bin", "--task-starts", "5,3"], None);
    assert!(!out.status.success());
}
