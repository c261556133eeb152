//! The `bitloc` binary: subcommands, outputs and exit codes.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use bitloc_core::geometry::{project, Pose};
use bitloc_harness::cli::{PosePair, PoseRecord};
use bitloc_harness::config::RunConfig;
use nalgebra::{Point3, Vector3};
use serde_json::{json, Value};
use tempfile::TempDir;

fn bitloc(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bitloc"))
        .arg("--out-dir")
        .arg(dir)
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("the binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn write_config(dir: &Path, value: &Value) -> String {
    let path = dir.join("config.json");
    fs::write(&path, value.to_string()).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn help_and_usage_errors() {
    let tmp = TempDir::new().unwrap();
    assert_eq!(bitloc(tmp.path(), &["--help"]).status.code(), Some(0));
    assert_eq!(bitloc(tmp.path(), &["--version"]).status.code(), Some(0));
    assert_eq!(bitloc(tmp.path(), &["frobnicate"]).status.code(), Some(1));
    assert_eq!(bitloc(tmp.path(), &["encode"]).status.code(), Some(1));
    assert_eq!(bitloc(tmp.path(), &["encode", "1;2"]).status.code(), Some(1));
    assert_eq!(bitloc(tmp.path(), &["decode", "10,01"]).status.code(), Some(1));
    let missing = tmp.path().join("missing.json");
    let o = bitloc(tmp.path(), &["--config", missing.to_str().unwrap(), "sample"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("missing.json"));
    let bad = write_config(tmp.path(), &json!({ "keypoints": 512, "no_such_field": 1 }));
    assert_eq!(bitloc(tmp.path(), &["--config", &bad, "sample"]).status.code(), Some(1));
    let inconsistent = write_config(tmp.path(), &json!({ "grid": { "roi_size": 256, "depth": 3, "base_depth": 4 } }));
    assert_eq!(bitloc(tmp.path(), &["--config", &inconsistent, "sample"]).status.code(), Some(1));
}

#[test]
fn encode_and_decode_round_trip() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(
        tmp.path(),
        &json!({
            "grid": { "roi_size": 256, "depth": 3, "base_depth": 2 },
            "train": { "backbone": {
                "input_channels": 3,
                "encoder_channels": [4, 4, 4, 4, 4, 4],
                "decoder_channels": [4],
                "decoder_kernel": 3
            } }
        }),
    );
    let o = bitloc(tmp.path(), &["--config", &cfg, "encode", "176,80", "-5,100"]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(stdout(&o), "101,010\n-\n");
    let o = bitloc(tmp.path(), &["--config", &cfg, "decode", "101,010", "-"]);
    assert_eq!(stdout(&o), "176,80\ninvalid\n");
    let decoded = read_json(&tmp.path().join("decoded.json"));
    assert_eq!(decoded[0]["point"], json!([176.0, 80.0]));
    assert_eq!(decoded[1]["point"], Value::Null);

    let o = bitloc(tmp.path(), &["decode", "000000,000000"]);
    assert_eq!(stdout(&o), "2,2\n");
}

#[test]
fn sample_and_graph_write_reports() {
    let tmp = TempDir::new().unwrap();
    assert_eq!(bitloc(tmp.path(), &["sample", "--count", "32"]).status.code(), Some(0));
    let kp = read_json(&tmp.path().join("keypoints.json"));
    assert_eq!(kp["points"].as_array().unwrap().len(), 32);
    let csv = fs::read_to_string(tmp.path().join("keypoints.csv")).unwrap();
    assert_eq!(csv.lines().count(), 33);

    assert_eq!(bitloc(tmp.path(), &["graph", "--count", "32", "--k", "5"]).status.code(), Some(0));
    let graph = read_json(&tmp.path().join("graph.json"));
    let neighbors = graph["neighbors"].as_array().unwrap();
    assert_eq!(neighbors.len(), 32);
    assert!(neighbors.iter().all(|n| n.as_array().unwrap().len() == 5));
    let edges = fs::read_to_string(tmp.path().join("graph.csv")).unwrap();
    assert_eq!(edges.lines().count(), 1 + 32 * 5);

    let mesh = tmp.path().join("tetra.obj");
    fs::write(&mesh, "v 0 0 0\nv 1 0 0\nv 0 1 0\nv 0 0 1\nf 1 2 3\nf 1 2 4\nf 1 3 4\nf 2 3 4\n").unwrap();
    let o = bitloc(tmp.path(), &["sample", "--mesh", mesh.to_str().unwrap(), "--count", "4"]);
    assert_eq!(o.status.code(), Some(0));
    let o = bitloc(tmp.path(), &["sample", "--mesh", mesh.to_str().unwrap(), "--count", "5"]);
    assert_eq!(o.status.code(), Some(1), "more keypoints than vertices is an argument error");
}

#[test]
fn selfocc_reports_the_filter_decision() {
    let tmp = TempDir::new().unwrap();
    let o = bitloc(tmp.path(), &["selfocc", "--level", "2"]);
    assert_eq!(o.status.code(), Some(0));
    let report = read_json(&tmp.path().join("selfocc.json"));
    assert_eq!(report["r_so"], json!(0.0));
    assert_eq!(report["filter"], json!(false));
    assert_eq!(report["viewpoints"], json!(162));
    let v = report["per_vertex_V"].as_array().unwrap();
    assert_eq!(v.len(), report["vertices"].as_array().unwrap().len());
    assert!(v.iter().all(|x| (0.0..=1.0).contains(&x.as_f64().unwrap())));
    let csv = fs::read_to_string(tmp.path().join("visibility.csv")).unwrap();
    assert_eq!(csv.lines().count(), v.len() + 1);

    let o = bitloc(tmp.path(), &["selfocc", "--level", "1", "--max-points", "50", "--radius", "3"]);
    assert_eq!(o.status.code(), Some(0));
    let report = read_json(&tmp.path().join("selfocc.json"));
    assert_eq!(report["per_vertex_V"].as_array().unwrap().len(), 50);
    assert_eq!(bitloc(tmp.path(), &["selfocc", "--radius", "0"]).status.code(), Some(1));
    assert_eq!(bitloc(tmp.path(), &["selfocc", "--flip", "0.5"]).status.code(), Some(1));
}

#[test]
fn solve_recovers_a_known_pose() {
    let tmp = TempDir::new().unwrap();
    let cfg = RunConfig::default();
    let pose = Pose::from_axis_angle(&Vector3::new(0.3, -1.0, 0.5), 0.8, Vector3::new(0.02, -0.05, 1.0));
    let pts: Vec<Point3<f64>> = (0..40)
        .map(|i| {
            let t = i as f64;
            Point3::new(0.1 * (t * 0.7).sin(), 0.08 * (t * 1.3).cos(), 0.06 * (t * 0.4).sin())
        })
        .collect();
    let px = project(&pts, &pose, &cfg.intrinsics);
    let mut csv = String::from("x,y,z,u,v\n");
    for (p, q) in pts.iter().zip(&px) {
        let q = q.unwrap();
        csv.push_str(&format!("{},{},{},{},{}\n", p.x, p.y, p.z, q.x, q.y));
    }
    let input = tmp.path().join("corr.csv");
    fs::write(&input, csv).unwrap();
    for solver in ["epnp", "ransac", "progx"] {
        let o = bitloc(tmp.path(), &["solve", input.to_str().unwrap(), "--solver", solver]);
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
        let out = read_json(&tmp.path().join("pose.json"));
        let rec: PoseRecord = serde_json::from_value(out["pose"].clone()).unwrap();
        let est = rec.to_pose().unwrap();
        assert!((est.rotation - pose.rotation).amax() < 1e-6);
        assert!((est.translation - pose.translation).amax() < 1e-6);
    }
    let csv = fs::read_to_string(tmp.path().join("pose.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2);

    fs::write(&input, "x,y,z,u,v\n0,0,1,1,1\n").unwrap();
    assert_eq!(bitloc(tmp.path(), &["solve", input.to_str().unwrap()]).status.code(), Some(2));
    fs::write(&input, "x,y,z\n0,0,1\n").unwrap();
    assert_eq!(bitloc(tmp.path(), &["solve", input.to_str().unwrap()]).status.code(), Some(2));
}

#[test]
fn eval_summarizes_pose_pairs() {
    let tmp = TempDir::new().unwrap();
    let gt = Pose::from_axis_angle(&Vector3::z(), 0.3, Vector3::new(0.0, 0.0, 1.0));
    let off = Pose::from_axis_angle(&Vector3::z(), 0.3, Vector3::new(0.05, 0.0, 1.0));
    let pairs = vec![
        PosePair {
            predicted: Some(PoseRecord::from(&gt)),
            ground_truth: PoseRecord::from(&gt),
        },
        PosePair {
            predicted: Some(PoseRecord::from(&off)),
            ground_truth: PoseRecord::from(&gt),
        },
        PosePair {
            predicted: None,
            ground_truth: PoseRecord::from(&gt),
        },
        PosePair {
            predicted: Some(PoseRecord::from(&gt)),
            ground_truth: PoseRecord::from(&gt),
        },
    ];
    let input = tmp.path().join("pairs.json");
    fs::write(&input, serde_json::to_string(&pairs).unwrap()).unwrap();
    let o = bitloc(tmp.path(), &["eval", input.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let report = read_json(&tmp.path().join("eval.json"));
    assert_eq!(report["samples"], json!(4));
    assert_eq!(report["failures"], json!(1));
    assert_eq!(report["add_s_recall"][2]["recall"], json!(50.0));
    assert!(fs::read_to_string(tmp.path().join("eval.csv")).unwrap().starts_with("ADD(-S) 0.02d"));

    fs::write(&input, "[]").unwrap();
    assert_eq!(bitloc(tmp.path(), &["eval", input.to_str().unwrap()]).status.code(), Some(2));
}

#[test]
fn synth_bench_and_train_toy_produce_artifacts() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), &json!({ "bench": { "scenes": 6 }, "keypoints": 128 }));
    let o = bitloc(tmp.path(), &["--config", &cfg, "--seed", "4", "synth-bench"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let report = read_json(&tmp.path().join("report.json"));
    assert_eq!(report["metrics"]["samples"], json!(6));
    assert_eq!(report["samples"].as_array().unwrap().len(), 6);
    let samples = fs::read_to_string(tmp.path().join("samples.csv")).unwrap();
    assert_eq!(samples.lines().count(), 7);
    assert_eq!(fs::read_to_string(tmp.path().join("metrics.csv")).unwrap().lines().count(), 2);
    let first = fs::read(tmp.path().join("report.json")).unwrap();
    bitloc(tmp.path(), &["--config", &cfg, "--seed", "4", "synth-bench"]);
    assert_eq!(first, fs::read(tmp.path().join("report.json")).unwrap(), "reports are reproducible");

    let train_dir = tmp.path().join("train");
    let tiny = json!({
        "grid": { "roi_size": 32, "depth": 4, "base_depth": 2 },
        "keypoints": 16,
        "knn": 4,
        "bench": { "scenes": 3, "mode": "network", "checkpoint": train_dir.join("toy.ckpt") },
        "train": {
            "nodes": 16, "knn": 4, "train_scenes": 4, "test_scenes": 2, "steps": 6,
            "pretrain_steps": 2, "batch": 2, "eval_interval": 3,
            "backbone": { "input_channels": 3, "encoder_channels": [4, 6, 8], "decoder_channels": [6, 4], "decoder_kernel": 3 },
            "plan": { "base_layers": 2, "refine_layers": 2, "head_hidden": 12, "patch": 1, "project_refinement": true }
        }
    });
    let cfg = write_config(tmp.path(), &tiny);
    let o = bitloc(&train_dir, &["--config", &cfg, "train-toy"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    for file in ["toy.ckpt", "train_log.json", "train_steps.csv", "train_evals.csv"] {
        assert!(train_dir.join(file).exists(), "{file} missing");
    }
    let log = read_json(&train_dir.join("train_log.json"));
    assert_eq!(log["steps"].as_array().unwrap().len(), 6);
    assert_eq!(log["evals"].as_array().unwrap().len(), 3);

    let bench_dir = tmp.path().join("net-bench");
    let o = bitloc(&bench_dir, &["--config", &cfg, "synth-bench"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(read_json(&bench_dir.join("report.json"))["mode"], json!("network"));

    fs::remove_file(train_dir.join("toy.ckpt")).unwrap();
    let o = bitloc(&bench_dir, &["--config", &cfg, "synth-bench"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("toy.ckpt"));
}
