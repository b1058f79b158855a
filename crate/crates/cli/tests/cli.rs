use std::path::Path;
use std::process::{Command, Output};

const SCENE: &str = r#"{
  "schema_version": 1,
  "grid": {"m": 10, "side_len": 0.15},
  "setup": {"freq": 4e9, "n_tx": 6, "n_rx": 12},
  "shapes": [{"kind": "disc", "center": [0.0, 0.0], "radius": 0.03, "eps_r": 2.0}]
}"#;

fn iscat(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_iscat"))
        .current_dir(dir)
        .args(["--log-level", "warn"])
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("scene.json"), SCENE).unwrap();
    ok(&iscat(dir.path(), &["--seed", "3", "simulate", "--scene", "scene.json", "--snr", "20", "--out", "sim"]));
    dir
}

#[test]
fn simulate_bp_evaluate_render() {
    let dir = setup();
    let d = dir.path();
    for f in ["e_sca.csv", "e_sca_clean.csv", "eps_true.csv", "scene.json", "run_meta.json"] {
        assert!(d.join("sim").join(f).exists(), "{f}");
    }
    ok(&iscat(d, &["bp", "--scene", "scene.json", "--data", "sim/e_sca.csv", "--out", "bp"]));
    let ev = iscat(d, &["evaluate", "--pred", "bp/eps_r.csv", "--scene", "scene.json", "--out", "ev"]);
    ok(&ev);
    assert!(String::from_utf8_lossy(&ev.stdout).contains("rrmse"));
    let metrics: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("ev/metrics.json")).unwrap()).unwrap();
    let rrmse = metrics["rrmse"].as_f64().unwrap();
    assert!(rrmse > 0.0 && rrmse < 1.0);
    ok(&iscat(d, &["render", "--eps", "bp/eps_r.csv", "--min", "1", "--max", "2.5", "--out", "img"]));
    let png = std::fs::read(d.join("img/eps_re.png")).unwrap();
    assert_eq!(&png[1..4], b"PNG");
    for sub in ["bp", "ev", "img"] {
        assert!(d.join(sub).join("run_meta.json").exists(), "{sub}");
    }
}

#[test]
fn simulate_is_seeded() {
    let dir = setup();
    let d = dir.path();
    ok(&iscat(d, &["--seed", "3", "simulate", "--scene", "scene.json", "--snr", "20", "--out", "again"]));
    ok(&iscat(d, &["--seed", "4", "simulate", "--scene", "scene.json", "--snr", "20", "--out", "other"]));
    let a = std::fs::read(d.join("sim/e_sca.csv")).unwrap();
    assert_eq!(a, std::fs::read(d.join("again/e_sca.csv")).unwrap());
    assert_ne!(a, std::fs::read(d.join("other/e_sca.csv")).unwrap());
}

#[test]
fn strict_reconstruct_is_bit_identical() {
    let dir = setup();
    let d = dir.path();
    std::fs::write(d.join("cfg.json"), r#"{"arch": {"channels": [2, 2, 2], "hidden": 8}}"#).unwrap();
    let args = |out: &'static str| {
        vec![
            "--strict-deterministic", "reconstruct", "--scene", "scene.json", "--data", "sim/e_sca.csv",
            "--config", "cfg.json", "--epochs", "5", "--precision", "f64", "--out", out,
        ]
    };
    ok(&iscat(d, &args("r1")));
    ok(&iscat(d, &args("r2")));
    let h1 = std::fs::read(d.join("r1/loss_history.csv")).unwrap();
    assert_eq!(h1, std::fs::read(d.join("r2/loss_history.csv")).unwrap());
    assert_eq!(String::from_utf8_lossy(&h1).lines().count(), 6);
    let meta: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("r1/run_meta.json")).unwrap()).unwrap();
    assert_eq!(meta["config"]["max_epochs"], 5);
    assert_eq!(meta["config"]["arch"]["hidden"], 8);
    assert_eq!(meta["threads"], 1);
}

#[test]
fn validation_errors_exit_with_2() {
    let dir = setup();
    let d = dir.path();
    std::fs::write(d.join("old.json"), r#"{"schema_version": 0, "grid": {"m": 8, "side_len": 0.1}, "setup": {"freq": 4e9}}"#)
        .unwrap();
    let out = iscat(d, &["simulate", "--scene", "old.json", "--out", "x"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("schema"));
    std::fs::write(d.join("bad.csv"), "tx,rx,re\n0,0,1\n").unwrap();
    let out = iscat(d, &["bp", "--scene", "scene.json", "--data", "bad.csv", "--out", "x"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("`im`"));
    let out = iscat(d, &["bp", "--scene", "missing.json", "--data", "bad.csv", "--out", "x"]);
    assert_eq!(out.status.code(), Some(2));
    let out = iscat(d, &["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn numerical_failure_exits_with_3() {
    let dir = setup();
    let d = dir.path();
    // all-zero data cannot normalize the data misfit
    let mut zero = String::from("tx,rx,re,im\n");
    for t in 0..6 {
        for r in 0..12 {
            zero.push_str(&format!("{t},{r},0,0\n"));
        }
    }
    std::fs::write(d.join("zero.csv"), zero).unwrap();
    let out = iscat(d, &["reconstruct", "--scene", "scene.json", "--data", "zero.csv", "--epochs", "2", "--out", "z"]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn fresnel_calibrate_only() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let desc = r#"{"name": "synthetic", "tx_radius": 1.67, "rx_radius": 1.67,
        "tx_angles": [0, 90, 180, 270], "rx_angles": [45, 135, 225, 315], "frequencies": [4e9]}"#;
    std::fs::write(d.join("desc.json"), desc).unwrap();
    let mut text = String::from("# tx rx f re im re_inc im_inc\n");
    for t in [0, 90, 180, 270] {
        for r in [45, 135, 225, 315] {
            text.push_str(&format!("{t} {r} 4 0.01 0.02 0.5 -0.25\n"));
        }
    }
    std::fs::write(d.join("meas.txt"), text).unwrap();
    let out = iscat(d, &["fresnel", "--data", "meas.txt", "--descriptor", "desc.json", "--freq", "4", "--calibrate-only", "--out", "f"]);
    ok(&out);
    let cal: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("f/calibration.json")).unwrap()).unwrap();
    assert_eq!(cal["samples"], 16);
    assert!(d.join("f/e_sca.csv").exists());
    // a record without incident columns cannot be calibrated
    std::fs::write(d.join("noinc.txt"), "0 45 4 0.01 0.02\n").unwrap();
    let out = iscat(d, &["fresnel", "--data", "noinc.txt", "--descriptor", "desc.json", "--freq", "4", "--calibrate-only", "--out", "g"]);
    assert_eq!(out.status.code(), Some(2));
}
