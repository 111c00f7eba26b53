use std::path::Path;
use std::process::{Command, Output};

use elastic_vit::bench::read_sweep_csv;
use elastic_vit::data::load_dataset;
use elastic_vit::extract::{load_image, save_image, Image};
use elastic_vit::geometry::ImageSpec;
use serde_json::{json, Value};

fn elastic(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_elastic"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = elastic(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn write_json(path: &Path, v: &Value) -> String {
    std::fs::write(path, serde_json::to_string_pretty(v).unwrap()).unwrap();
    path.to_string_lossy().into_owned()
}

fn data() -> Value {
    json!({"source": {"classes": 2, "size": 24, "side": 32, "seed": 4}, "val_size": 8})
}

fn train_config(out: &Path, epochs: usize) -> Value {
    json!({
        "model": {"r": 8, "channels": 1, "dim": 16, "heads": 2, "depth": 1,
                  "mlp_ratio": 2, "classes": 2},
        "train": {"epochs": epochs, "batch_size": 8, "warmup_steps": 1,
                  "elastic_fraction": 0.5, "seed": 1},
        "data": data(),
        "out": out,
    })
}

#[test]
fn gen_data_writes_a_loadable_cache() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("shapes.bin");
    let cfg = write_json(
        &dir.path().join("gen.json"),
        &json!({"dataset": {"classes": 3, "size": 9, "side": 16}, "out": out}),
    );
    ok(&["gen-data", "--config", &cfg, "--seed", "5"]);
    let ds = load_dataset(&out).unwrap();
    assert_eq!((ds.len(), ds.classes), (9, 3));
}

#[test]
fn train_resume_eval_and_sweep() {
    let dir = tempfile::tempdir().unwrap();
    let full = dir.path().join("full");
    let half = dir.path().join("half");
    let cfg_full = write_json(&dir.path().join("full.json"), &train_config(&full, 2));
    ok(&["--deterministic", "train", "--config", &cfg_full]);
    let history = std::fs::read_to_string(full.join("history.csv")).unwrap();
    assert!(history.starts_with("epoch,loss,train_acc,val_acc\n"));
    assert_eq!(history.lines().count(), 3);

    // stop after one epoch, then resume into a fresh directory
    let mut stopped = train_config(&half, 2);
    stopped["stop_after"] = json!(1);
    let cfg_half = write_json(&dir.path().join("half.json"), &stopped);
    ok(&["--deterministic", "train", "--config", &cfg_half]);
    let resumed_dir = dir.path().join("resumed");
    let mut resume = train_config(&resumed_dir, 2);
    resume["resume"] = json!(half.join("model.ckpt"));
    let cfg_resume = write_json(&dir.path().join("resume.json"), &resume);
    ok(&["--deterministic", "train", "--config", &cfg_resume]);
    assert_eq!(
        std::fs::read(resumed_dir.join("model.ckpt")).unwrap(),
        std::fs::read(full.join("model.ckpt")).unwrap()
    );
    let tail = std::fs::read_to_string(resumed_dir.join("history.csv")).unwrap();
    assert_eq!(tail.lines().nth(1), history.lines().nth(2));

    let ckpt = full.join("model.ckpt");
    let eval_cfg = write_json(
        &dir.path().join("eval.json"),
        &json!({"checkpoint": ckpt, "data": data(),
                "eval": {"sampler": "grid", "perturb": {"shake": "inf"}}}),
    );
    let report = dir.path().join("report.json");
    ok(&["eval", "--config", &eval_cfg, "--out", report.to_str().unwrap()]);
    let v: Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(v["total"], json!(8));
    assert!(v["accuracy"].as_f64().unwrap() <= 1.0);

    let sweep_cfg = write_json(
        &dir.path().join("sweep.json"),
        &json!({"experiment": "dropout_sweep", "checkpoint": ckpt, "data": data(),
                "axis": {"param": "dropout", "values": [0.5, 0.0]}, "seeds": [2, 1]}),
    );
    let sweep_out = dir.path().join("sweep");
    ok(&["sweep", "--config", &sweep_cfg, "--out", sweep_out.to_str().unwrap()]);
    let text = std::fs::read_to_string(sweep_out.join("dropout_sweep.csv")).unwrap();
    let rows = read_sweep_csv(&text).unwrap();
    assert_eq!(rows.len(), 4);
    let order: Vec<(f64, u64)> = rows.iter().map(|r| (r.value, r.seed)).collect();
    assert_eq!(order, [(0.0, 1), (0.0, 2), (0.5, 1), (0.5, 2)]);
    assert_eq!(rows[0].accuracy, rows[1].accuracy);
    assert_eq!(rows[2].tokens, 8.0);
    let echo: Value =
        serde_json::from_str(&std::fs::read_to_string(sweep_out.join("dropout_sweep.json")).unwrap())
            .unwrap();
    assert_eq!(echo["config"]["experiment"], json!("dropout_sweep"));

    // rerunning overwrites identical content
    ok(&["sweep", "--config", &sweep_cfg, "--out", sweep_out.to_str().unwrap()]);
    assert_eq!(std::fs::read_to_string(sweep_out.join("dropout_sweep.csv")).unwrap(), text);
}

#[test]
fn deterministic_and_parallel_training_agree() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let ca = write_json(&dir.path().join("a.json"), &train_config(&a, 1));
    let cb = write_json(&dir.path().join("b.json"), &train_config(&b, 1));
    ok(&["--deterministic", "train", "--config", &ca]);
    ok(&["--threads", "2", "train", "--config", &cb]);
    assert_eq!(
        std::fs::read(a.join("model.ckpt")).unwrap(),
        std::fs::read(b.join("model.ckpt")).unwrap()
    );
}

#[test]
fn visualize_keeps_dimensions() {
    let dir = tempfile::tempdir().unwrap();
    let img_path = dir.path().join("in.png");
    save_image(&Image::filled(ImageSpec::new(32, 24, 1).unwrap(), 0.3), &img_path).unwrap();
    let out = dir.path().join("out.ppm");
    let cfg = write_json(
        &dir.path().join("vis.json"),
        &json!({"image": img_path, "r": 8, "out": out,
                "eval": {"sampler": "grid", "perturb": {"scale_min": 0.8, "scale_max": 1.5}}}),
    );
    ok(&["visualize", "--config", &cfg, "--seed", "3"]);
    let img = load_image(&out).unwrap();
    assert_eq!((img.spec.width, img.spec.height, img.spec.channels), (32, 24, 3));
}

#[test]
fn config_errors_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_json(&dir.path().join("bad.json"), &json!({"out": "x"}));
    let out = elastic(&["train", "--config", &cfg]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("missing field `data`"), "{err}");

    let cfg = write_json(
        &dir.path().join("unknown.json"),
        &json!({"experiment": "zoom", "checkpoint": "m", "data": data(), "out": "o"}),
    );
    let out = elastic(&["sweep", "--config", &cfg]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown experiment"));

    let out = elastic(&["train"]);
    assert!(!out.status.success());
}
