//! Scene generation, corruption and the inference pipeline at benchmark scale.

use bitloc_core::codes::decode_codes;
use bitloc_core::geometry::{build_knn_graph, farthest_point_sample, project};
use bitloc_core::metrics::rotation_angle_deg;
use bitloc_core::solver::GridMask;
use bitloc_harness::bench::{filter_rule, run_benchmark, SampleRecord};
use bitloc_harness::config::{MaskPolicy, NoiseModel, PipelineConfig, RunConfig, SolverKind};
use bitloc_harness::noise::corrupt_codes;
use bitloc_harness::object::SceneObject;
use bitloc_harness::pipeline::{median, CodeSource, Pipeline};
use bitloc_harness::scene::generate_scenes;
use bitloc_harness::seeds::{SeedStream, Stream};
use bitloc_net::model::PoseNet;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn bench_config(scenes: usize, solver: SolverKind, noise: NoiseModel) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.bench.scenes = scenes;
    cfg.pipeline = PipelineConfig {
        solver,
        mask_policy: MaskPolicy::Auto,
        noise,
    };
    cfg
}

#[test]
fn scenes_match_exact_projections_and_masks() {
    let cfg = RunConfig::default();
    let object = SceneObject::from_config(&cfg.object).unwrap();
    let kps = farthest_point_sample(&object.model, cfg.keypoints, 0).unwrap().points;
    let seeds = SeedStream::new(1, Stream::TestScenes);
    let scenes = generate_scenes(&object, &kps, &cfg.intrinsics, &cfg.pose, &cfg.grid, 10, |i| seeds.seed(i)).unwrap();
    for s in &scenes {
        let exact = project(&kps, &s.pose, &cfg.intrinsics);
        for ((p, q), e) in s.projections.iter().zip(&s.roi_points).zip(exact) {
            assert_eq!(Some(*p), e);
            assert!((s.roi.to_roi(p) - q).norm() < 1e-9);
        }
        for ((d, q), code) in decode_codes(&s.gt_codes, &cfg.grid).iter().zip(&s.roi_points).zip(&s.gt_codes.codes) {
            if let Some(d) = d {
                assert!((d - q).norm() <= 2.0 * 2f64.sqrt() + 1e-9);
                let c = code.cell();
                assert!(s.gt_masks.full.get(c.ix, c.iy), "gt cell outside the full mask");
            }
        }
    }
    let again = generate_scenes(&object, &kps, &cfg.intrinsics, &cfg.pose, &cfg.grid, 10, |i| seeds.seed(i)).unwrap();
    assert_eq!(scenes, again);
}

#[test]
fn corruption_flip_count_is_binomial() {
    let cfg = RunConfig::default();
    let object = SceneObject::from_config(&cfg.object).unwrap();
    let kps = farthest_point_sample(&object.model, cfg.keypoints, 0).unwrap().points;
    let scene = generate_scenes(&object, &kps, &cfg.intrinsics, &cfg.pose, &cfg.grid, 1, |_| 5).unwrap().remove(0);
    let noise = NoiseModel {
        bit_flip_prob: 0.05,
        ..NoiseModel::clean()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (mut flips, mut bits) = (0usize, 0usize);
    while bits < 10_000 {
        let out = corrupt_codes(&scene.gt_codes, &noise, &mut rng);
        for (a, b) in scene.gt_codes.codes.iter().zip(&out.codes).filter(|(a, _)| a.visible) {
            for (u, v) in a.x.iter().chain(&a.y).zip(b.x.iter().chain(&b.y)) {
                flips += (u != v) as usize;
                bits += 1;
            }
        }
    }
    let mean = bits as f64 * 0.05;
    let sigma = (bits as f64 * 0.05 * 0.95).sqrt();
    assert!((flips as f64 - mean).abs() <= 3.0 * sigma, "{flips} flips over {bits} bits");
}

#[test]
fn oracle_pipeline_recovers_poses_to_quantization() {
    let cfg = bench_config(50, SolverKind::Ransac, NoiseModel::clean());
    let object = SceneObject::from_config(&cfg.object).unwrap();
    let kps = farthest_point_sample(&object.model, cfg.keypoints, 0).unwrap().points;
    let seeds = SeedStream::new(cfg.seed, Stream::BenchScenes);
    let scenes = generate_scenes(&object, &kps, &cfg.intrinsics, &cfg.pose, &cfg.grid, 50, |i| seeds.seed(i)).unwrap();
    let pipe = Pipeline {
        keypoints: &kps,
        intrinsics: cfg.intrinsics,
        grid: cfg.grid,
        solver: cfg.solver,
        config: cfg.pipeline.clone(),
        auto_filter: false,
    };
    let (mut rot, mut trans) = (Vec::new(), Vec::new());
    for s in &scenes {
        let pose = pipe.infer(s, CodeSource::Oracle, 0).unwrap().pose.unwrap();
        rot.push(rotation_angle_deg(&pose.rotation, &s.pose.rotation));
        trans.push((pose.translation - s.pose.translation).norm());
    }
    let (r, t) = (median(&rot).unwrap(), median(&trans).unwrap());
    assert!(r <= 1.0 && t <= 0.01, "median rotation {r}°, translation {t} m");
}

#[test]
fn clean_oracle_benchmark_is_perfect_and_deterministic() {
    let cfg = bench_config(200, SolverKind::Progx, NoiseModel::clean());
    let report = run_benchmark(&cfg).unwrap();
    assert_eq!(report.metrics.samples, 200);
    assert_eq!(report.metrics.recall_for(0.1), Some(100.0));
    assert!(!report.auto_filter, "a convex object never calls for mask filtering");
    let mut small = cfg.clone();
    small.bench.scenes = 20;
    let a = run_benchmark(&small).unwrap();
    assert_eq!(a, run_benchmark(&small).unwrap());
    assert_eq!(a.samples[..], report.samples[..20]);
}

#[test]
fn coherence_solver_survives_five_percent_bit_flips() {
    let noise = NoiseModel {
        bit_flip_prob: 0.05,
        ..NoiseModel::clean()
    };
    let report = run_benchmark(&bench_config(200, SolverKind::Progx, noise)).unwrap();
    let recall = report.metrics.recall_for(0.1).unwrap();
    assert!(recall >= 90.0, "ADD(-S) 0.1d recall {recall}");
}

#[test]
fn report_totals_match_the_per_sample_records() {
    let noise = NoiseModel {
        bit_flip_prob: 0.2,
        outlier_prob: 0.3,
        ..NoiseModel::clean()
    };
    let mut cfg = bench_config(40, SolverKind::Ransac, noise);
    cfg.solver.ransac_iters = 20;
    let report = run_benchmark(&cfg).unwrap();
    let d = report.diameter;
    let count = |f: &dyn Fn(&SampleRecord) -> bool| 100.0 * report.samples.iter().filter(|r| f(r)).count() as f64 / 40.0;
    for entry in &report.metrics.add_s_recall {
        let expect = count(&|r| r.add_s.is_some_and(|e| e < entry.threshold * d));
        assert!((entry.recall - expect).abs() < 1e-9);
    }
    for entry in &report.metrics.deg_cm_recall {
        let n = entry.threshold;
        let expect = count(&|r| r.rot_deg.is_some_and(|e| e < n) && r.trans_m.is_some_and(|e| e < n / 100.0));
        assert!((entry.recall - expect).abs() < 1e-9);
    }
    let failures = report.samples.iter().filter(|r| r.failure.is_some()).count();
    assert_eq!(report.metrics.failures, failures);
}

#[test]
fn empty_benchmark_is_undefined() {
    let cfg = bench_config(0, SolverKind::Progx, NoiseModel::clean());
    assert!(matches!(
        run_benchmark(&cfg),
        Err(bitloc_harness::Error::Core(bitloc_core::Error::UndefinedInput(_)))
    ));
}

#[test]
fn filter_rule_is_off_for_the_convex_toy_object() {
    let object = SceneObject::from_config(&RunConfig::default().object).unwrap();
    let (r_so, filter) = filter_rule(&object).unwrap();
    assert_eq!(r_so, 0.0);
    assert!(!filter);
}

#[test]
fn mask_filter_removes_correspondences_outside_the_visible_mask() {
    let cfg = RunConfig::default();
    let object = SceneObject::from_config(&cfg.object).unwrap();
    let kps = farthest_point_sample(&object.model, 128, 0).unwrap().points;
    let mut scene = generate_scenes(&object, &kps, &cfg.intrinsics, &cfg.pose, &cfg.grid, 1, |_| 21).unwrap().remove(0);
    let mut pc = cfg.pipeline.clone();
    pc.mask_policy = MaskPolicy::Always;
    pc.solver = SolverKind::Epnp;
    let pipe = Pipeline {
        keypoints: &kps,
        intrinsics: cfg.intrinsics,
        grid: cfg.grid,
        solver: cfg.solver,
        config: pc,
        auto_filter: false,
    };
    // Keep only the lower half of the visible mask.
    for iy in 0..32 {
        for ix in 0..64 {
            scene.gt_masks.visible.set(ix, iy, false);
        }
    }
    let filtered = pipe.infer(&scene, CodeSource::Oracle, 0).unwrap();
    let expected = scene
        .gt_codes
        .codes
        .iter()
        .filter(|c| c.visible && scene.gt_masks.visible.get(c.cell().ix, c.cell().iy))
        .count();
    assert!(filtered.diagnostics.mask_applied);
    assert_eq!(filtered.diagnostics.used, expected);
    assert!(expected > 0 && expected < filtered.diagnostics.predicted_visible);
    scene.gt_masks.visible = GridMask::filled(64, false);
    let empty = pipe.infer(&scene, CodeSource::Oracle, 0).unwrap();
    assert_eq!(empty.diagnostics.used, 0);
    assert!(empty.pose.is_none());
}

#[test]
fn image_inference_matches_scene_inference_in_network_mode() {
    let cfg = RunConfig::default();
    let object = SceneObject::from_config(&cfg.object).unwrap();
    let kps = farthest_point_sample(&object.model, cfg.train.nodes, 0).unwrap().points;
    let graph = build_knn_graph(&kps, cfg.train.knn).unwrap();
    let net = PoseNet::new(cfg.net_config(), 3).unwrap();
    let scene = generate_scenes(&object, &kps, &cfg.intrinsics, &cfg.pose, &cfg.grid, 1, |_| 8).unwrap().remove(0);
    let mut pc = cfg.pipeline.clone();
    pc.mask_policy = MaskPolicy::Always;
    let pipe = Pipeline {
        keypoints: &kps,
        intrinsics: cfg.intrinsics,
        grid: cfg.grid,
        solver: cfg.solver,
        config: pc,
        auto_filter: false,
    };
    let from_scene = pipe.infer(&scene, CodeSource::Network { net: &net, graph: &graph }, 4).unwrap();
    let from_image = pipe.infer_image(&scene.image, &scene.roi, &net, &graph, 4).unwrap();
    assert_eq!(from_scene.codes, from_image.codes);
    assert_eq!(from_scene.pose, from_image.pose);
    assert_eq!(from_scene.failure, from_image.failure);
    assert_eq!(from_scene.diagnostics.used, from_image.diagnostics.used);
    assert_eq!(from_scene.diagnostics.stage_errors.len(), 4);
    assert!(from_image.diagnostics.stage_errors.is_empty());
}
