use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn lab(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rlsd-lab"))
        .args(args)
        .current_dir(cwd)
        .env_remove("RLSD_LAB_SEED")
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const SHORT_TRAIN: &str = r#"{
  "method": "rlsd",
  "steps": 3,
  "suite": {"family": "modular-arithmetic-chain", "count": 24, "seed": 0}
}"#;

#[test]
fn unknown_subcommand_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = lab(&["fly"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(lab(&["--help"], dir.path()).status.success());
}

#[test]
fn bad_config_names_file_and_line() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.json"), "{\n  \"steps\": 3,\n  \"method\": \"dance\"\n}").unwrap();
    let o = lab(&["train", "--config", "bad.json"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    let msg = stderr(&o);
    assert!(msg.contains("bad.json"), "{msg}");
    assert!(msg.contains("line 3"), "{msg}");
}

#[test]
fn invalid_seed_variable_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_rlsd-lab"))
        .args(["gen-suite"])
        .current_dir(dir.path())
        .env("RLSD_LAB_SEED", "seven")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn gen_suite_writes_a_parsable_file() {
    let dir = tempfile::tempdir().unwrap();
    let o = lab(&["gen-suite", "--seed", "5", "--out", "s"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let text = fs::read_to_string(dir.path().join("s/suite.txt")).unwrap();
    let suite = rlsd_core::parse_suite(&text).unwrap();
    let mut cfg = rlsd_core::TrainerConfig::default().suite;
    cfg.seed = 5;
    assert_eq!(suite, rlsd_core::make_suite(&cfg).unwrap());
}

#[test]
fn report_reproduces_the_training_csvs() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    fs::write(p.join("short.json"), SHORT_TRAIN).unwrap();
    let o = lab(&["train", "--config", "short.json", "--out", "run"], p);
    assert!(o.status.success(), "{}", stderr(&o));
    for name in ["config.json", "metrics.jsonl", "credits.jsonl", "checkpoint.txt"] {
        assert!(p.join("run").join(name).exists(), "{name}");
    }
    assert!(lab(&["report", "--run", "run", "--out", "a"], p).status.success());
    assert!(lab(&["report", "--run", "run", "--out", "b"], p).status.success());
    let mut files = 0;
    for entry in fs::read_dir(p.join("run/series")).unwrap() {
        let name = entry.unwrap().file_name();
        let train = fs::read(p.join("run/series").join(&name)).unwrap();
        assert_eq!(fs::read(p.join("a").join(&name)).unwrap(), train, "{name:?}");
        assert_eq!(fs::read(p.join("b").join(&name)).unwrap(), train, "{name:?}");
        files += 1;
    }
    assert_eq!(files, 7);
}

#[test]
fn seed_flag_overrides_environment_and_config() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    fs::write(p.join("short.json"), SHORT_TRAIN).unwrap();
    let with_env = Command::new(env!("CARGO_BIN_EXE_rlsd-lab"))
        .args(["train", "--config", "short.json", "--out", "env", "--seed", "4"])
        .current_dir(p)
        .env("RLSD_LAB_SEED", "9")
        .output()
        .unwrap();
    assert!(with_env.status.success());
    assert!(lab(&["train", "--config", "short.json", "--out", "flag", "--seed", "4"], p).status.success());
    assert_eq!(
        fs::read(p.join("env/metrics.jsonl")).unwrap(),
        fs::read(p.join("flag/metrics.jsonl")).unwrap()
    );
}

#[test]
fn missing_run_directory_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = lab(&["report", "--run", "nowhere"], dir.path());
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn theory_runs_on_a_small_budget() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    fs::write(
        p.join("theory.json"),
        r#"{"kl_draws": 20, "gradient_draws": 10, "joints": 4, "leakage_steps": 4,
            "trilemma_seeds": [0], "trilemma_steps": 30, "checkpoint_every": 10}"#,
    )
    .unwrap();
    let o = lab(&["theory", "--config", "theory.json"], p);
    assert_eq!(o.status.code(), Some(0), "{}{}", String::from_utf8_lossy(&o.stdout), stderr(&o));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(p.join("out/theory_report.json")).unwrap()).unwrap();
    assert_eq!(report["passed"], serde_json::Value::Bool(true));
    assert_eq!(report["checks"].as_array().unwrap().len(), 6);
}

#[test]
fn theory_config_errors_carry_the_line() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("t.json"), "{\n\"kl_draws\": -1\n}").unwrap();
    let o = lab(&["theory", "--config", "t.json"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("t.json:2"), "{}", stderr(&o));
}
