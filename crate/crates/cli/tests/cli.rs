use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn idm(args: &[&str], dirs: &[&Path]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_idm"));
    cmd.args(args);
    for d in dirs {
        cmd.arg(d);
    }
    cmd.output().unwrap()
}

fn manifest(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("run_manifest.json")).unwrap()).unwrap()
}

fn simulate_small(root: &Path, seed: &str) -> std::path::PathBuf {
    let out = root.join(format!("sim{seed}"));
    let o = idm(&["simulate", "--scenario", "A1", "--seed", seed, "--n-train", "120", "--n-test", "30", "--out"], &[&out]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    out
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let o = idm(&["fit", "--bogus"], &[]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
    let o = idm(&["fit", "--data", "x.csv", "--out", "o", "--a", "1"], &[]);
    assert_eq!(o.status.code(), Some(1));
    let o = idm(&["fit", "--data", "x.csv", "--out", "o", "--a", "1", "--lambda", "1,2"], &[]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn help_exits_zero() {
    assert_eq!(idm(&["--help"], &[]).status.code(), Some(0));
}

#[test]
fn simulate_outputs_and_reproducibility() {
    let tmp = TempDir::new().unwrap();
    let a = simulate_small(tmp.path(), "3");
    for f in ["train.csv", "test.csv", "train_truth.csv", "test_truth.csv", "scenario.json", "run_manifest.json"] {
        assert!(a.join(f).exists(), "missing {f}");
    }
    let m = manifest(&a);
    assert_eq!(m["status"], "ok");
    assert_eq!(m["seed"], 3);
    let again = tmp.path().join("again");
    idm(&["simulate", "--scenario", "A1", "--seed", "3", "--n-train", "120", "--n-test", "30", "--out"], &[&again]);
    assert_eq!(std::fs::read(a.join("train.csv")).unwrap(), std::fs::read(again.join("train.csv")).unwrap());
    let other = simulate_small(tmp.path(), "4");
    assert_ne!(std::fs::read(a.join("train.csv")).unwrap(), std::fs::read(other.join("train.csv")).unwrap());
}

#[test]
fn invalid_data_exits_two_with_manifest() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("bad.csv");
    std::fs::write(&data, "id,v0,l,r,delta_i,t\ns1,0,1,,0,2\n").unwrap();
    let out = tmp.path().join("fit");
    let o = idm(&["fit", "--a", "1", "--lambda", "1,1,1", "--data"], &[&data, Path::new("--out"), &out]);
    assert_eq!(o.status.code(), Some(2));
    let m = manifest(&out);
    assert_eq!(m["exit_code"], 2);
    assert_eq!(m["status"], "invalid_input");
}

#[test]
fn unknown_config_key_exits_two() {
    let tmp = TempDir::new().unwrap();
    let cfg = tmp.path().join("run.toml");
    std::fs::write(&cfg, "[grid]\nn_lambdas = 5\n").unwrap();
    let out = tmp.path().join("o");
    let o = idm(&["simulate", "--scenario", "A1", "--config"], &[&cfg, Path::new("--out"), &out]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn fit_refit_predict_bootstrap_pipeline() {
    let tmp = TempDir::new().unwrap();
    let sim = simulate_small(tmp.path(), "11");
    let fit = tmp.path().join("fit");
    let o = idm(&["fit", "--a", "1", "--lambda", "15,15,15", "--data"], &[&sim.join("train.csv"), Path::new("--out"), &fit]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(fit.join("model.json").exists());
    assert!(!fit.join("bic_table.csv").exists());

    let refit = tmp.path().join("refit");
    let o = idm(
        &["refit", "--data"],
        &[&sim.join("train.csv"), Path::new("--model"), &fit.join("model.json"), Path::new("--out"), &refit],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let ratios = std::fs::read_to_string(refit.join("ratios.csv")).unwrap();
    assert!(ratios.starts_with("transition,covariate,beta,se,ratio,ci_low,ci_high"));

    let pred = tmp.path().join("pred");
    let o = idm(
        &["predict", "--horizon", "8", "--model"],
        &[&refit.join("refit.json"), Path::new("--input"), &sim.join("test.csv"), Path::new("--out"), &pred],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let mut rdr = csv::Reader::from_path(pred.join("probabilities.csv")).unwrap();
    let mut n = 0;
    for rec in rdr.records() {
        let rec = rec.unwrap();
        let v: Vec<f64> = (2..5).map(|k| rec[k].parse().unwrap()).collect();
        assert!((v.iter().sum::<f64>() - 1.0).abs() < 1e-8);
        n += 1;
    }
    assert_eq!(n, 30);

    let o = idm(
        &["predict", "--horizon", "40", "--model"],
        &[&refit.join("refit.json"), Path::new("--input"), &sim.join("test.csv"), Path::new("--out"), &pred],
    );
    assert_eq!(o.status.code(), Some(2));

    let boot = tmp.path().join("boot");
    let o = idm(
        &["bootstrap", "--n-boot", "3", "--seed", "2", "--data"],
        &[&sim.join("train.csv"), Path::new("--model"), &fit.join("model.json"), Path::new("--out"), &boot],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let lines = std::fs::read_to_string(boot.join("bootstrap_tally.csv")).unwrap().lines().count();
    assert_eq!(lines, 1 + 3 * 50);

    let o = idm(
        &["bootstrap", "--n-boot", "3", "--data"],
        &[&sim.join("train.csv"), Path::new("--model"), &refit.join("refit.json"), Path::new("--out"), &boot],
    );
    assert_eq!(o.status.code(), Some(2));
}
