use std::fs;
use std::process::Command;

fn pacmlp() -> Command {
    Command::new(env!("CARGO_BIN_EXE_pacmlp"))
}

#[test]
fn train_then_bound_then_plot() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let status = pacmlp()
        .args(["train", "--dataset", "toy:40x3", "--arch", "3-6-4-2", "--opt", "adam"])
        .args(["--lr", "0.01", "--epochs", "5", "--batch", "8", "--seed", "4", "--out"])
        .arg(&out)
        .output()
        .unwrap();
    assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
    let ckpt = out.join("train_seed4.ckpt");
    assert!(ckpt.exists() && out.join("train_seed4.csv").exists());

    let bound = pacmlp()
        .args(["bound", "--dataset", "toy:40x3", "--ckpt"])
        .arg(&ckpt)
        .output()
        .unwrap();
    assert!(bound.status.success(), "{}", String::from_utf8_lossy(&bound.stderr));
    let report: serde_json::Value = serde_json::from_slice(&bound.stdout).unwrap();
    assert_eq!(report["n"], 40);
    let risk = report["empirical_risk"].as_f64().unwrap();
    let split = report["mean_energy"].as_f64().unwrap() + report["mean_log_z"].as_f64().unwrap();
    assert!((risk - split).abs() < 1e-10);

    let svg = dir.path().join("p.svg");
    let plot = pacmlp()
        .args(["plot", "--cols", "train_loss,bound_proxy", "--csv"])
        .arg(out.join("train_seed4.csv"))
        .arg("--out")
        .arg(&svg)
        .output()
        .unwrap();
    assert!(plot.status.success());
    assert_eq!(fs::read_to_string(&svg).unwrap().matches("<polyline").count(), 2);

    let missing = pacmlp()
        .args(["plot", "--cols", "nope", "--csv"])
        .arg(out.join("train_seed4.csv"))
        .arg("--out")
        .arg(&svg)
        .output()
        .unwrap();
    assert!(!missing.status.success());
    assert!(String::from_utf8_lossy(&missing.stderr).contains("nope"));
}

#[test]
fn sweep_from_config_reports_checks() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("dgap.cfg");
    fs::write(&cfg, "kind = dgap\ndataset = toy:20x4\nepochs = 3\nseeds = 1\n").unwrap();
    let out = pacmlp()
        .args(["sweep", "--config"])
        .arg(&cfg)
        .args(["--set", "epochs=2", "--out"])
        .arg(dir.path().join("o"))
        .output()
        .unwrap();
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("epoch1_d_gap_finite seed=1"), "{stdout}");
    assert_eq!(out.status.code(), Some(1), "short run should fail its convergence checks");
    let rows = fs::read_to_string(dir.path().join("o/dgap_seed1.csv")).unwrap();
    assert_eq!(rows.lines().filter(|l| !l.starts_with('#')).count(), 3);
}

#[test]
fn bad_config_names_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "kind = arch\n\nepochs = many\n").unwrap();
    let out = pacmlp().args(["sweep", "--config"]).arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("line 3"), "{err}");
}
