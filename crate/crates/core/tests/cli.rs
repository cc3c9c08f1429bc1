use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"
seeds = [0, 1]
[output]
dir = "unused"
[dataset]
devices = 4
samples_per_device = 20
dimension = 8
[network]
kind = "log_spaced"
min_sigma2 = 0.1
max_sigma2 = 10.0
[training]
algorithms = ["signsgd", "sbfl_gaussian"]
step = { kind = "inverse_smoothness", multiple = 1.0 }
rounds = 12
init_std = 1.0
"#;

fn sbfl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sbfl")).args(args).output().unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

fn error_json(out: &Output) -> serde_json::Value {
    let stderr = String::from_utf8_lossy(&out.stderr);
    serde_json::from_str(stderr.lines().last().unwrap()).unwrap()
}

#[test]
fn unknown_key_is_rejected_with_its_path() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "bad.toml", &SMALL.replace("devices = 4", "devices = 4\nbogus = 1"));
    let out = sbfl(&["train", "--config", &cfg]);
    assert_eq!(out.status.code(), Some(2));
    let e = error_json(&out);
    assert_eq!(e["error"], "config");
    assert_eq!(e["key"], "dataset.bogus");
}

#[test]
fn invalid_value_names_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "bad.toml", &SMALL.replace("devices = 4", "devices = 0"));
    let out = sbfl(&["train", "--config", &cfg]);
    assert_eq!(out.status.code(), Some(2));
    let key = error_json(&out)["key"].as_str().unwrap().to_string();
    assert!(key.starts_with("dataset"), "{key}");
}

#[test]
fn train_writes_traces_and_summaries() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "small.toml", SMALL);
    let out_dir = dir.path().join("out");
    let out = sbfl(&["train", "--config", &cfg, "--out", out_dir.to_str().unwrap(), "--seeds", "3..6", "--jobs", "2"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let summary = fs::read_to_string(out_dir.join("summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 1 + 2 * 3);
    assert!(summary.lines().next().unwrap().starts_with("algorithm,gamma,delta,seed"));
    for alg in ["signsgd", "sbfl_gaussian"] {
        for seed in 3..6 {
            let trace = fs::read_to_string(out_dir.join(format!("traces/{alg}_seed{seed}.jsonl"))).unwrap();
            assert_eq!(trace.lines().count(), 12);
        }
    }
    assert!(out_dir.join("aggregate.csv").exists());
}

#[test]
fn summaries_are_byte_identical_across_runs_and_job_counts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "small.toml", SMALL);
    let run = |name: &str, jobs: &str| {
        let o = dir.path().join(name);
        let out = sbfl(&["train", "--config", &cfg, "--out", o.to_str().unwrap(), "--jobs", jobs]);
        assert!(out.status.success());
        fs::read(o.join("summary.csv")).unwrap()
    };
    let a = run("a", "1");
    assert_eq!(a, run("b", "1"));
    assert_eq!(a, run("c", "3"));
}

#[test]
fn mode_flag_changes_the_estimator() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "small.toml", &SMALL.replace("[\"signsgd\", \"sbfl_gaussian\"]", "[\"sbfl_gaussian\"]"));
    let run = |mode: &str| {
        let o = dir.path().join(mode);
        let out = sbfl(&["train", "--config", &cfg, "--out", o.to_str().unwrap(), "--mode", mode]);
        assert!(out.status.success());
        fs::read_to_string(o.join("summary.csv")).unwrap()
    };
    assert_ne!(run("corrected"), run("paper-literal"));
    let bad = sbfl(&["train", "--config", &cfg, "--mode", "literal"]);
    assert!(!bad.status.success());
}

#[test]
fn sweep_reports_every_cell() {
    let dir = tempfile::tempdir().unwrap();
    let text = format!("{SMALL}[sweep]\ngammas = [1e-2, 1e-4]\ndeltas = [0.0, 0.9]\n[threshold]\nmetric = \"excess_fraction\"\nlevel = 0.5\n");
    let cfg = write(dir.path(), "sweep.toml", &text);
    let o = dir.path().join("out");
    let out = sbfl(&["sweep", "--config", &cfg, "--out", o.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let table = String::from_utf8_lossy(&out.stdout);
    assert_eq!(table.lines().count(), 1 + 2 * 2 * 2);
    assert_eq!(fs::read_to_string(o.join("sweep.txt")).unwrap(), table);
    assert_eq!(fs::read_to_string(o.join("sweep.csv")).unwrap().lines().count(), 1 + 8);
}

#[test]
fn oracle_and_mse_verify_run_from_small_configs() {
    let dir = tempfile::tempdir().unwrap();
    let o = dir.path().join("oracle");
    let out = sbfl(&["oracle", "--out", o.to_str().unwrap()]);
    assert!(out.status.success());
    assert_eq!(fs::read_to_string(o.join("oracle.jsonl")).unwrap().lines().count(), 20);

    let cfg = write(dir.path(), "mse.toml", "nu = [1.0]\nh = [1.0]\nsigma2 = [1.0]\nsamples = 200000\n");
    let o = dir.path().join("mse");
    let out = sbfl(&["mse-verify", "--config", &cfg, "--out", o.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
    assert_eq!(fs::read_to_string(o.join("mse.csv")).unwrap().lines().count(), 2);
}

#[test]
fn bound_check_writes_both_bounds() {
    let dir = tempfile::tempdir().unwrap();
    let text = SMALL
        .replace("[\"signsgd\", \"sbfl_gaussian\"]", "[\"sbfl_gaussian\"]")
        .replace("max_sigma2 = 10.0", "max_sigma2 = 1.0\nfading = \"fixed\"");
    let cfg = write(dir.path(), "bound.toml", &text);
    let o = dir.path().join("out");
    let out = sbfl(&["bound-check", "--config", &cfg, "--out", o.to_str().unwrap()]);
    assert!(out.status.code() == Some(0) || out.status.code() == Some(1));
    let csv = fs::read_to_string(o.join("bound.csv")).unwrap();
    assert!(csv.lines().next().unwrap().contains("bound_corrected"));
    assert_eq!(csv.lines().count(), 1 + 2 * 12);

    let momentum = write(dir.path(), "m.toml", &text.replace("rounds = 12", "rounds = 12\ndelta = 0.9"));
    assert_eq!(sbfl(&["bound-check", "--config", &momentum]).status.code(), Some(2));
}
