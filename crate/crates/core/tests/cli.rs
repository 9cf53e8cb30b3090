use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use betaips::cli::cli_dispatch;
use betaips::io::{self, Metric};

fn betaips(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_betaips"))
        .args(args)
        .current_dir(dir)
        .output()
        .unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

const SMALL: &str = "\
seed = 3
[environment]
num_actions = 3
context_dim = 2
dataset_size = 300
[optimizer]
epochs = 2
batch_size = 64
[training]
runs = 2
test_contexts = 100
[ope]
action_space_sizes = [3, 4]
inverse_temperatures = [1.0]
dataset_sizes = [40, 80, 160]
replications = 5
context_dim = 2
true_value_contexts = 1000
target_training_size = 200
";

#[test]
fn simulate_writes_dataset_and_prints_digest() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("c.toml"), SMALL).unwrap();
    let out = betaips(dir.path(), &["simulate", "--config", "c.toml", "--out", "d.csv"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let digest_line = stderr(&out).lines().find(|l| l.starts_with("config sha256: ")).unwrap().to_string();
    assert_eq!(digest_line.len(), "config sha256: ".len() + 64);
    let data = io::read_dataset(&dir.path().join("d.csv")).unwrap();
    assert_eq!(data.len(), 300);
    assert_eq!(data.context_dim(), 2);
}

#[test]
fn seed_flag_overrides_the_config() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("c.toml"), SMALL).unwrap();
    let run = |seed: &str, out: &str| {
        assert!(betaips(dir.path(), &["simulate", "--config", "c.toml", "--seed", seed, "--out", out])
            .status
            .success());
        fs::read(dir.path().join(out)).unwrap()
    };
    let from_config = {
        assert!(betaips(dir.path(), &["simulate", "--config", "c.toml", "--out", "cfg.csv"]).status.success());
        fs::read(dir.path().join("cfg.csv")).unwrap()
    };
    assert_eq!(run("3", "a.csv"), from_config);
    assert_ne!(run("4", "b.csv"), from_config);
}

#[test]
fn snips_with_mini_batches_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("c.toml"),
        format!("{SMALL}\n").replace("[training]\n", "[training]\nestimators = [\"ips\", \"snips\"]\n"),
    )
    .unwrap();
    let out = betaips(dir.path(), &["train", "--config", "c.toml", "--out", "r.csv"]);
    assert_eq!(out.status.code(), Some(2));
    let msg = stderr(&out);
    assert!(msg.contains("no longer decomposes"), "{msg}");
    assert!(msg.contains("snips"), "{msg}");
    assert!(!dir.path().join("r.csv").exists());
}

#[test]
fn snips_trains_with_full_batches() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SMALL
        .replace("batch_size = 64", "batch_size = \"full\"")
        .replace("[training]\n", "[training]\nestimators = [\"snips\", \"beta-ips\", \"ips\"]\n");
    fs::write(dir.path().join("c.toml"), cfg).unwrap();
    let out = betaips(dir.path(), &["train", "--config", "c.toml", "--out", "r.csv"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let records = io::read_results(&dir.path().join("r.csv")).unwrap();
    assert!(records.iter().any(|r| r.estimator == "snips" && r.metric_name == Metric::TestValue));
    assert!(!records.iter().any(|r| r.estimator == "snips" && r.metric_name == Metric::GradVariance));
}

#[test]
fn ope_emits_one_row_per_estimator_cell_and_metric() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("c.toml"), SMALL).unwrap();
    let out = betaips(dir.path(), &["ope", "--config", "c.toml", "--out", "o.csv", "--threads", "2"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let records = io::read_results(&dir.path().join("o.csv")).unwrap();
    // 4 default estimators x (2 K x 1 tau x 3 n) cells x 3 metrics.
    assert_eq!(records.len(), 4 * 6 * 3);
    assert!(records.iter().all(|r| r.epoch.is_none() && r.seed == 3));
}

#[test]
fn train_writes_policies_that_evaluate_reads() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = format!(
        "{SMALL}\n[output]\npolicy_dir = \"policies\"\n[evaluate]\ndataset = \"d.csv\"\npolicy = \"policies/beta-ips-grad-seed3.csv\"\nreference_value = 0.5\n"
    );
    fs::write(dir.path().join("c.toml"), cfg).unwrap();
    assert!(betaips(dir.path(), &["train", "--config", "c.toml", "--out", "t.csv"]).status.success());
    assert!(betaips(dir.path(), &["simulate", "--config", "c.toml", "--out", "d.csv"]).status.success());
    let out = betaips(dir.path(), &["evaluate", "--config", "c.toml", "--out", "e.csv"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.starts_with("estimator,value,rel_abs_error\n"));
    assert_eq!(stdout.lines().count(), 5);
    let records = io::read_results(&dir.path().join("e.csv")).unwrap();
    assert!(records.iter().any(|r| r.metric_name == Metric::RelAbsError));
}

#[test]
fn sweep_reports_best_lambda() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = format!("{SMALL}\n[sweep]\nlambdas = [0.0, 0.5]\ntest_contexts = 100\n");
    fs::write(dir.path().join("c.toml"), cfg).unwrap();
    let out = betaips(dir.path(), &["sweep", "--config", "c.toml", "--out", "s.csv"]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(String::from_utf8(out.stdout).unwrap().contains("best lambda: "));
    let records = io::read_results(&dir.path().join("s.csv")).unwrap();
    assert!(records.iter().any(|r| r.estimator == "lambda-ips=0.5"));
}

#[test]
fn config_problems_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.toml"), "[optimizer]\nlearning_rat = 0.1\n").unwrap();
    let out = betaips(dir.path(), &["train", "--config", "bad.toml", "--out", "r.csv"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("learning_rat"));

    let out = betaips(dir.path(), &["simulate", "--config", "missing.toml", "--out", "d.csv"]);
    assert_eq!(out.status.code(), Some(2));

    let out = betaips(dir.path(), &["simulate"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("--out"));

    let out = betaips(dir.path(), &["evaluate"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("evaluate.dataset"));

    fs::write(dir.path().join("p.toml"), "[evaluate]\ndataset = \"d.csv\"\npolicy = \"p.csv\"\nreference_value = 0.5\n").unwrap();
    fs::write(dir.path().join("d.csv"), "x_0,action,reward\n1,0,1\n").unwrap();
    fs::write(dir.path().join("p.csv"), "2,1\n0\n0\n").unwrap();
    let out = betaips(dir.path(), &["evaluate", "--config", "p.toml"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("propensity"));
}

#[test]
fn runtime_failures_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("p.toml"), "[evaluate]\ndataset = \"d.csv\"\npolicy = \"p.csv\"\nreference_value = 0\n").unwrap();
    fs::write(dir.path().join("d.csv"), "x_0,action,reward,propensity\n1,0,1,0.5\n").unwrap();
    fs::write(dir.path().join("p.csv"), "2,1\n0\n0\n").unwrap();
    let out = betaips(dir.path(), &["evaluate", "--config", "p.toml"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("relative_absolute_error"));
}

#[test]
fn dispatch_handles_usage_errors_in_process() {
    assert_eq!(cli_dispatch(["betaips", "frobnicate"]), 2);
    assert_eq!(cli_dispatch(["betaips", "train", "--threads", "0"]), 2);
    assert_eq!(cli_dispatch(["betaips", "--help"]), 0);
}
