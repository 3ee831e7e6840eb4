use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn glassopt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_glassopt")).args(args).env_remove("GLASSOPT_OUT").output().expect("spawn glassopt")
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn write_config(dir: &Path, name: &str, body: &str) -> String {
    let path = dir.join(name);
    fs::write(&path, body).unwrap();
    path.to_string_lossy().into_owned()
}

fn read_csv(path: &Path) -> Vec<Vec<String>> {
    let mut rdr = csv::Reader::from_path(path).unwrap();
    let header: Vec<String> = rdr.headers().unwrap().iter().map(String::from).collect();
    let mut rows = vec![header];
    rows.extend(rdr.records().map(|r| r.unwrap().iter().map(String::from).collect()));
    rows
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(glassopt(&[]).status.code(), Some(2));
    assert_eq!(glassopt(&["verify", "--suite", "bogus"]).status.code(), Some(2));
    assert_eq!(glassopt(&["train", "--config", "/nonexistent/run.toml"]).status.code(), Some(2));
    assert_eq!(glassopt(&["simulate", "glass-walk", "--rho", "-1"]).status.code(), Some(2));
    assert_eq!(glassopt(&["--help"]).status.code(), Some(0));
}

#[test]
fn unknown_config_key_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "bad.toml", "name = \"x\"\ntask = \"least-squares\"\nseeds = [1]\nlearning_rate = 0.1\n");
    let out = glassopt(&["train", "--config", &cfg]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rate"));
}

#[test]
fn verify_naq_passes_and_writes_rows() {
    let tmp = tempfile::tempdir().unwrap();
    let out = glassopt(&["--out", tmp.path().to_str().unwrap(), "verify", "--suite", "naq"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stdout));
    let rows = read_csv(&tmp.path().join("verify_naq.csv"));
    assert_eq!(rows[0], ["quantity", "empirical", "predicted", "std_error", "n"]);
    assert!(rows.len() > 1);
}

#[test]
fn quadratic_probe_reports_exponent_two() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = configs().join("powerlaw_quadratic.toml");
    let out = glassopt(&["--out", tmp.path().to_str().unwrap(), "probe", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    let rows = read_csv(&tmp.path().join("powerlaw_seed1.csv"));
    assert_eq!(rows[0], ["partition", "sum_v_l", "sum_v_2l", "p"]);
    let p: f64 = rows[1][3].parse().unwrap();
    assert!((p - 2.0).abs() < 0.05, "p = {p}");
}

#[test]
fn seed_flag_replaces_seed_list() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = configs().join("powerlaw_quadratic.toml");
    let out = glassopt(&["--out", tmp.path().to_str().unwrap(), "--seed", "7", "probe", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    assert!(tmp.path().join("powerlaw_seed7.csv").exists());
    assert!(!tmp.path().join("powerlaw_seed1.csv").exists());
}

const MLP_RUN: &str = r#"
name = "cli-train"
task = "synthetic-classification"
seeds = [1, 2]
steps = 16
batch_size = 32

[model]
layer_widths = [16, 24, 10]
loss = "softmax-cross-entropy"

[data]
n_train = 128
"#;

#[test]
fn adam_train_writes_summary_and_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let body = format!("{MLP_RUN}\n[optimizer]\nkind = \"adam\"\nlr = 0.001\nbeta1 = 0.9\nbeta2 = 0.999\neps = 1e-8\n");
    let cfg = write_config(tmp.path(), "adam.toml", &body);
    let out_dir = tmp.path().join("out");
    let out = glassopt(&["--out", out_dir.to_str().unwrap(), "train", "--config", &cfg]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let summary = read_csv(&out_dir.join("summary.csv"));
    assert_eq!(summary[0], ["seed", "final_metric", "grad_evals", "status"]);
    let labels: Vec<&str> = summary[1..].iter().map(|r| r[0].as_str()).collect();
    assert_eq!(labels, ["1", "2", "min", "median", "max"]);
    assert_eq!(summary[1][2], "16");
    let manifest = fs::read_to_string(out_dir.join("manifest.toml")).unwrap();
    assert!(manifest.contains("code_version") && manifest.contains("cli-train"));
    let log = read_csv(&out_dir.join("train_seed1.csv"));
    assert_eq!(log.len(), 17);
}

#[test]
fn curvature_term_selection_changes_the_run() {
    let tmp = tempfile::tempdir().unwrap();
    let mut logs = Vec::new();
    for terms in ["[\"rho\"]", "[\"h_abs\"]"] {
        let body = format!("{MLP_RUN}\n[optimizer]\nkind = \"alice\"\nterms = {terms}\nlambda_max = 0.01\n");
        let cfg = write_config(tmp.path(), "alice.toml", &body);
        let out_dir = tmp.path().join(terms.replace(['[', ']', '"'], ""));
        let out = glassopt(&["--out", out_dir.to_str().unwrap(), "train", "--config", &cfg]);
        assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
        logs.push(fs::read(out_dir.join("train_seed1.csv")).unwrap());
    }
    assert_ne!(logs[0], logs[1]);
}

#[test]
fn quick_steps_reduce_gradient_evaluations() {
    let tmp = tempfile::tempdir().unwrap();
    let body = format!("{MLP_RUN}\n[optimizer]\nkind = \"alice\"\nquick_steps = 3\n");
    let cfg = write_config(tmp.path(), "quick.toml", &body);
    let out_dir = tmp.path().join("out");
    assert_eq!(glassopt(&["--out", out_dir.to_str().unwrap(), "train", "--config", &cfg]).status.code(), Some(0));
    let summary = read_csv(&out_dir.join("summary.csv"));
    // 16 steps = 4 full updates (3 evaluations) + 12 quick steps (1 evaluation)
    assert_eq!(summary[1][2], "24");
}

#[test]
fn output_dir_comes_from_config_when_flag_absent() {
    let tmp = tempfile::tempdir().unwrap();
    let target = tmp.path().join("from-config");
    let body = format!(
        "name = \"ls\"\ntask = \"least-squares\"\nseeds = [3]\nsteps = 5\noutput_dir = \"{}\"\n",
        target.display()
    );
    let cfg = write_config(tmp.path(), "ls.toml", &body);
    assert_eq!(glassopt(&["train", "--config", &cfg]).status.code(), Some(0));
    assert!(target.join("summary.csv").exists());
}

#[test]
fn simulations_write_their_tables() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().to_str().unwrap();
    let out = glassopt(&["--out", dir, "simulate", "glass-walk", "--rho", "2", "--lambda", "0.5", "--trials", "20000"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stdout));
    let rows = read_csv(&tmp.path().join("glass_walk.csv"));
    assert_eq!(rows[1][0], "mean_abs_delta");
    let out = glassopt(&["--out", dir, "simulate", "underdetermined-ls"]);
    assert_eq!(out.status.code(), Some(0));
    assert!(tmp.path().join("underdetermined_ls.csv").exists());
}

#[test]
fn shipped_configs_parse_and_validate() {
    let mut n = 0;
    for entry in fs::read_dir(configs()).unwrap() {
        let path = entry.unwrap().path();
        let cfg = glassopt::harness::ExperimentConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        cfg.validate().unwrap();
        n += 1;
    }
    assert!(n >= 5);
}
