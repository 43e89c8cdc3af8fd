mod common;

use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

use common::{source_pngs, tiny_train};
use scanformer::dataset::PoseJson;
use scanformer::image_io::decode_png;
use scanformer::ply;
use scanformer::rngt::Container;
use scanformer_core::geometry::{CameraPose, Intrinsics};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_scanformer"));
    c.env_remove("RNG_CONFIG");
    c
}

fn ok(out: Output) -> Value {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    serde_json::from_str(text.lines().last().unwrap()).unwrap()
}

fn err(out: Output) -> Value {
    assert!(!out.status.success());
    serde_json::from_slice(&out.stderr).unwrap()
}

fn tiny_config_env() -> String {
    serde_json::to_string(&tiny_train()).unwrap()
}

/// Trains the tiny config for a few steps through the binary.
fn train_tiny(dir: &Path) -> std::path::PathBuf {
    let ckpt = dir.join("tiny.ckpt");
    let log = dir.join("log.jsonl");
    let summary = ok(bin()
        .env("RNG_CONFIG", tiny_config_env())
        .args(["train", "--stop-at", "6", "--out"])
        .arg(&ckpt)
        .arg("--log")
        .arg(&log)
        .output()
        .unwrap());
    assert_eq!(summary["steps"], 6);
    assert_eq!(std::fs::read_to_string(&log).unwrap().lines().count(), 6);
    ckpt
}

fn write_sources(dir: &Path) -> std::path::PathBuf {
    let images = dir.join("images");
    std::fs::create_dir(&images).unwrap();
    for (i, png) in source_pngs(3).iter().enumerate() {
        std::fs::write(images.join(format!("{i:02}.png")), png).unwrap();
    }
    images
}

#[test]
fn usage_errors_are_json() {
    let e = err(bin().args(["scan", "--ckpt", "x", "--images", "y", "--out", "z", "--views", "0"]).output().unwrap());
    assert_eq!(e["error"], "usage");
    let e = err(bin().args(["eval", "--ckpt", "x"]).output().unwrap());
    assert_eq!(e["error"], "usage");
    let e = err(bin().arg("nonsense").output().unwrap());
    assert_eq!(e["error"], "usage");
    let e = err(bin().env("RNG_CONFIG", "[1, 2]").args(["dump-scene", "--index", "0", "--out", "/dev/null"]).output().unwrap());
    assert_eq!(e["error"], "usage");
    assert!(bin().arg("--help").output().unwrap().status.success());
}

#[test]
fn missing_checkpoint_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let e = err(bin()
        .args(["eval", "--ckpt"])
        .arg(dir.path().join("absent"))
        .arg("--out")
        .arg(dir.path().join("r.json"))
        .output()
        .unwrap());
    assert_eq!(e["error"], "io");
}

#[test]
fn train_eval_render_scan_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = train_tiny(dir.path());

    let eval = |name: &str| {
        let out = dir.path().join(name);
        ok(bin().args(["eval", "--scenes", "2", "--seed", "4", "--ckpt"]).arg(&ckpt).arg("--out").arg(&out).output().unwrap());
        std::fs::read(out).unwrap()
    };
    let (a, b) = (eval("a.json"), eval("b.json"));
    assert_eq!(a, b);
    let report: Value = serde_json::from_slice(&a).unwrap();
    assert_eq!(report["seed"], 4);
    assert_eq!(report["report"]["scenes"], 2);

    let images = write_sources(dir.path());
    let pose_path = dir.path().join("pose.json");
    std::fs::write(&pose_path, serde_json::to_vec(&PoseJson::from_pose(&CameraPose::canonical(Intrinsics::from_fov(16, 16, 60.0)))).unwrap()).unwrap();
    let png = dir.path().join("view.png");
    let maps = dir.path().join("view.rngt");
    let r = ok(bin()
        .args(["render", "--ckpt"])
        .arg(&ckpt)
        .arg("--images")
        .arg(&images)
        .arg("--pose")
        .arg(&pose_path)
        .arg("--out")
        .arg(&png)
        .arg("--pointmap")
        .arg(&maps)
        .output()
        .unwrap());
    assert_eq!(r["source_poses"].as_array().unwrap().len(), 4);
    let img = decode_png(&std::fs::read(&png).unwrap()).unwrap();
    assert_eq!((img.width, img.height), (16, 16));
    let c = Container::read(&maps).unwrap();
    assert_eq!(c.require("pointmap").unwrap().dims, vec![16, 16, 3]);

    let ply_path = dir.path().join("scan.ply");
    let s = ok(bin()
        .args(["scan", "--views", "4", "--conf-quantile", "0", "--ckpt"])
        .arg(&ckpt)
        .arg("--images")
        .arg(&images)
        .arg("--out")
        .arg(&ply_path)
        .output()
        .unwrap());
    let cloud = ply::read(&ply_path).unwrap();
    assert_eq!(s["points"].as_u64().unwrap() as usize, cloud.len());
}

#[test]
fn bench_reports_cheaper_cached_queries() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = train_tiny(dir.path());
    let out = bin().args(["bench", "--queries", "3", "--ckpt"]).arg(&ckpt).output().unwrap();
    assert!(out.status.success());
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(v["stage2_flops"].as_u64().unwrap() < v["joint_flops"].as_u64().unwrap());
    assert!(v["flop_ratio"].as_f64().unwrap() < 1.0);
}

#[test]
fn dump_scene_honours_config_override() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("scene.rngt");
    assert!(bin().env("RNG_CONFIG", tiny_config_env()).args(["dump-scene", "--index", "1", "--out"]).arg(&out).status().unwrap().success());
    let c = Container::read(&out).unwrap();
    let dims = &c.tensors[0].dims;
    assert_eq!(&dims[dims.len() - 3..dims.len() - 1], &[16, 16], "{dims:?}");
}
