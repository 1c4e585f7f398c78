//! The `wbfusion` binary: exit codes, files written, error messages.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn wbfusion(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_wbfusion")).args(args).output().expect("spawn wbfusion")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn ok(out: &Output) {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn read_json(path: impl AsRef<Path>) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn gen(dir: &Path, n: &str, size: &str, seed: &str) -> PathBuf {
    let data = dir.join(format!("data_{n}_{size}_{seed}"));
    ok(&wbfusion(&["--seed", seed, "gen-data", "--n", n, "--size", size, "--out", p(&data)]));
    data
}

#[test]
fn gen_data_writes_the_standard_split() {
    let _serial = crate::serial();
    let tmp = tempfile::tempdir().unwrap();
    let data = gen(tmp.path(), "20", "64", "7");
    let m = read_json(data.join("manifest.json"));
    let count = |k: &str| m[k].as_array().unwrap().len();
    assert_eq!((count("train"), count("val"), count("test")), (13, 3, 4));
    let scenes = std::fs::read_dir(&data).unwrap().filter(|e| e.as_ref().unwrap().path().is_dir()).count();
    assert_eq!(scenes, 20);
    let first = data.join(m["test"][0].as_str().unwrap());
    for f in ["tungsten", "fluorescent", "daylight", "cloudy", "shade", "gt", "awb"] {
        let img = image::open(first.join(format!("{f}.png"))).unwrap();
        assert_eq!((img.width(), img.height()), (64, 64));
    }
    assert!(first.join("meta.json").exists());
}

#[test]
fn usage_errors_exit_2() {
    let _serial = crate::serial();
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("d");
    assert_eq!(code(&wbfusion(&["gen-data", "--n", "0", "--out", p(&out)])), 2);
    assert_eq!(code(&wbfusion(&["gen-data", "--n", "3", "--size", "4", "--out", p(&out)])), 2);
    assert_eq!(code(&wbfusion(&["frobnicate"])), 2);
    assert_eq!(code(&wbfusion(&["--threads", "0", "hull", "--data", p(&out)])), 2);
    assert_eq!(code(&wbfusion(&["eval", "--data", p(&out)])), 2);
    let bad = tmp.path().join("bad.json");
    std::fs::write(&bad, "[1, 2]").unwrap();
    assert_eq!(code(&wbfusion(&["--config", p(&bad), "gen-data", "--n", "3", "--out", p(&out)])), 2);
    assert!(!out.exists());
}

#[test]
fn config_file_overrides_flags() {
    let _serial = crate::serial();
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"n_scenes": 7, "height": 12, "width": 20}"#).unwrap();
    let data = tmp.path().join("d");
    ok(&wbfusion(&["--config", p(&cfg), "gen-data", "--n", "3", "--out", p(&data)]));
    let m = read_json(data.join("manifest.json"));
    assert_eq!(m["config"]["n_scenes"], 7);
    let id = m["train"][0].as_str().unwrap();
    let img = image::open(data.join(id).join("gt.png")).unwrap();
    assert_eq!((img.width(), img.height()), (20, 12));
}

#[test]
fn missing_validation_split_is_a_configuration_error() {
    let _serial = crate::serial();
    let tmp = tempfile::tempdir().unwrap();
    // Five scenes leave no validation scenes at 65/15/20.
    let data = gen(tmp.path(), "5", "16", "1");
    let ckpt = tmp.path().join("m.wbf");
    let out = wbfusion(&["train", "--steps", "3", "--data", p(&data), "--checkpoint", p(&ckpt)]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("validation"));
    assert!(!ckpt.exists());
}

#[test]
fn train_eval_fuse_round_trip() {
    let _serial = crate::serial();
    let tmp = tempfile::tempdir().unwrap();
    let data = gen(tmp.path(), "10", "24", "2");
    let ckpt = tmp.path().join("runs/m.wbf");
    ok(&wbfusion(&[
        "--seed", "3", "train", "--steps", "30", "--val-interval", "10", "--data", p(&data), "--checkpoint", p(&ckpt),
    ]));
    let manifest = read_json(tmp.path().join("runs/m.wbf.manifest.json"));
    let vals = manifest["validations"].as_array().unwrap();
    assert_eq!(vals.len(), 3);
    let best = vals.iter().map(|v| v["mean_delta_e"].as_f64().unwrap()).fold(f64::INFINITY, f64::min);
    assert_eq!(manifest["selected_val_delta_e"].as_f64().unwrap(), best);

    let reports = tmp.path().join("reports");
    ok(&wbfusion(&["eval", "--checkpoint", p(&ckpt), "--data", p(&data), "--out", p(&reports)]));
    ok(&wbfusion(&["--threads", "2", "eval", "--baseline", "gt", "--data", p(&data), "--out", p(&reports)]));
    let model = read_json(reports.join("metrics_test.json"));
    let gt = read_json(reports.join("metrics_test_gt.json"));
    assert_eq!(model["image_count"], 2);
    for m in ["delta_e", "mse", "mae"] {
        assert_eq!(gt[m]["mean"].as_f64().unwrap(), 0.0, "{m}");
    }
    let table = std::fs::read_to_string(reports.join("metrics_test.txt")).unwrap();
    assert!(table.contains("trimean"));
    assert_eq!(code(&wbfusion(&["eval", "--baseline", "sunset", "--data", p(&data)])), 2);

    let scene = data.join(model["images"][0]["id"].as_str().unwrap());
    let presets: Vec<PathBuf> = ["tungsten", "fluorescent", "daylight", "cloudy", "shade"]
        .iter()
        .map(|n| scene.join(format!("{n}.png")))
        .collect();
    let fused = tmp.path().join("fused.png");
    let mut args = vec!["fuse", "--checkpoint", p(&ckpt), "--out", p(&fused)];
    args.extend(presets.iter().map(|x| p(x)));
    ok(&wbfusion(&args));
    let img = image::open(&fused).unwrap();
    assert_eq!((img.width(), img.height()), (24, 24));

    // A preset of the wrong size is named in the error.
    let small = tmp.path().join("odd_cloudy.png");
    image::RgbImage::new(8, 8).save(&small).unwrap();
    let mut args = vec!["fuse", "--checkpoint", p(&ckpt), "--out", p(&fused)];
    args.extend(presets[..3].iter().map(|x| p(x)));
    args.push(p(&small));
    args.push(p(&presets[4]));
    let out = wbfusion(&args);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("odd_cloudy.png"), "{}", String::from_utf8_lossy(&out.stderr));

    // Four presets is a usage error; a missing checkpoint a runtime one.
    let mut args = vec!["fuse", "--checkpoint", p(&ckpt), "--out", p(&fused)];
    args.extend(presets[..4].iter().map(|x| p(x)));
    assert_eq!(code(&wbfusion(&args)), 2);
    let missing = tmp.path().join("none.wbf");
    let mut args = vec!["fuse", "--checkpoint", p(&missing), "--out", p(&fused)];
    args.extend(presets.iter().map(|x| p(x)));
    assert_eq!(code(&wbfusion(&args)), 1);
}

#[test]
fn hull_reports_and_maps() {
    let _serial = crate::serial();
    let tmp = tempfile::tempdir().unwrap();
    let data = gen(tmp.path(), "10", "16", "4");
    let out = tmp.path().join("hull");
    ok(&wbfusion(&["hull", "--data", p(&data), "--split", "train", "--out", p(&out), "--maps"]));
    let h = read_json(out.join("hull.json"));
    assert!(h["out_of_hull_fraction"].as_f64().unwrap() > 0.0);
    let scenes = h["scenes"].as_array().unwrap();
    assert_eq!(scenes.len(), 7);
    for s in scenes {
        assert!(out.join(format!("{}_distance.png", s["id"].as_str().unwrap())).exists());
    }

    let loose = tmp.path().join("loose");
    ok(&wbfusion(&["hull", "--data", p(&data), "--tol", "1.0", "--out", p(&loose)]));
    assert_eq!(read_json(loose.join("hull.json"))["out_of_hull_fraction"].as_f64().unwrap(), 0.0);
    assert_eq!(code(&wbfusion(&["hull", "--data", p(&data), "--tol", "-1"])), 2);
    assert_eq!(code(&wbfusion(&["hull", "--data", p(&tmp.path().join("nowhere"))])), 1);
}
