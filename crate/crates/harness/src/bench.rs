//! Benchmarks: scenes, inference, metrics and their persistence as JSON and CSV.

use std::fs;
use std::path::{Path, PathBuf};

use bitloc_core::geometry::{build_knn_graph, farthest_point_sample};
use bitloc_core::metrics::{sample_errors, summarize, MetricsReport, SampleErrors};
use bitloc_core::visibility::{sample_viewpoints, visibility_profile, VisibilityOptions};
use bitloc_net::checkpoint;
use bitloc_net::model::PoseNet;
use serde::{Deserialize, Serialize};

use crate::config::{InferenceMode, RunConfig};
use crate::error::{Error, Result};
use crate::object::SceneObject;
use crate::parallel::map_indexed;
use crate::pipeline::{CodeSource, Pipeline};
use crate::scene::generate_scene;
use crate::seeds::{SeedStream, Stream};

/// Icosphere level of the viewpoints behind the self-occlusion profile.
pub const PROFILE_VIEW_LEVEL: u32 = 3;
/// Camera distance of those viewpoints, in object diameters.
pub const PROFILE_RADIUS: f64 = 5.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub index: usize,
    pub scene_seed: u64,
    /// Solver error message of a failed sample.
    pub failure: Option<String>,
    /// Pose errors; `None` for a failed sample, which counts as maximal error.
    pub add: Option<f64>,
    pub adds: Option<f64>,
    pub add_s: Option<f64>,
    pub rot_deg: Option<f64>,
    pub trans_m: Option<f64>,
    pub predicted_visible: usize,
    pub used: usize,
    pub inliers: Option<usize>,
    pub mask_applied: bool,
    /// Median localization error at full code depth, in RoI pixels.
    pub median_px: Option<f64>,
}

impl SampleRecord {
    pub fn errors(&self) -> SampleErrors {
        let or_inf = |v: Option<f64>| v.unwrap_or(f64::INFINITY);
        SampleErrors {
            add: or_inf(self.add),
            adds: or_inf(self.adds),
            add_s: or_inf(self.add_s),
            rot_deg: or_inf(self.rot_deg),
            trans_m: or_inf(self.trans_m),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub mode: InferenceMode,
    pub diameter: f64,
    /// Self-occlusion ratio of the object and the resulting filter decision.
    pub r_so: f64,
    pub auto_filter: bool,
    pub metrics: MetricsReport,
    pub samples: Vec<SampleRecord>,
}

/// Self-occlusion ratio of the object and whether the rule enables filtering.
pub fn filter_rule(object: &SceneObject) -> Result<(f64, bool)> {
    let views = sample_viewpoints(PROFILE_VIEW_LEVEL, PROFILE_RADIUS);
    let profile = visibility_profile(&object.model, &views, &VisibilityOptions::default())?;
    Ok((profile.r_so, profile.filter_decision(object.textureless)))
}

/// Generates `bench.scenes` scenes, runs the pipeline on each and summarizes.
pub fn run_benchmark(cfg: &RunConfig) -> Result<BenchReport> {
    cfg.validate()?;
    if cfg.bench.scenes == 0 {
        return Err(bitloc_core::Error::UndefinedInput("the benchmark has no scenes".into()).into());
    }
    let object = SceneObject::from_config(&cfg.object)?;
    let (r_so, auto_filter) = filter_rule(&object)?;
    let (keypoint_count, net) = match cfg.bench.mode {
        InferenceMode::Oracle => (cfg.keypoints, None),
        InferenceMode::Network => {
            let path = cfg
                .bench
                .checkpoint
                .as_ref()
                .ok_or_else(|| Error::config("network mode needs bench.checkpoint"))?;
            let mut net = PoseNet::new(cfg.net_config(), 0)?;
            checkpoint::load(&mut net, path).map_err(|e| Error::net_at(path, e))?;
            (cfg.train.nodes, Some(net))
        }
    };
    let keypoints = farthest_point_sample(&object.model, keypoint_count, 0)?.points;
    let graph = match net {
        Some(_) => Some(build_knn_graph(&keypoints, cfg.train.knn)?),
        None => None,
    };
    let pipeline = Pipeline {
        keypoints: &keypoints,
        intrinsics: cfg.intrinsics,
        grid: cfg.grid,
        solver: cfg.solver,
        config: cfg.pipeline.clone(),
        auto_filter,
    };
    let scene_seeds = SeedStream::new(cfg.seed, Stream::BenchScenes);
    let noise_seeds = SeedStream::new(cfg.seed, Stream::Noise);
    let records = map_indexed(cfg.bench.scenes, |i| -> Result<SampleRecord> {
        let seed = scene_seeds.seed(i as u64);
        let scene = generate_scene(&object, &keypoints, &cfg.intrinsics, &cfg.pose, &cfg.grid, seed)?;
        let source = match (&net, &graph) {
            (Some(net), Some(graph)) => CodeSource::Network { net, graph },
            _ => CodeSource::Oracle,
        };
        let out = pipeline.infer(&scene, source, noise_seeds.seed(i as u64))?;
        let e = sample_errors(out.pose.as_ref(), &scene.pose, &object.model, &object.symmetry);
        let finite = |v: f64| v.is_finite().then_some(v);
        Ok(SampleRecord {
            index: i,
            scene_seed: seed,
            failure: out.failure,
            add: finite(e.add),
            adds: finite(e.adds),
            add_s: finite(e.add_s),
            rot_deg: finite(e.rot_deg),
            trans_m: finite(e.trans_m),
            predicted_visible: out.diagnostics.predicted_visible,
            used: out.diagnostics.used,
            inliers: out.diagnostics.inliers,
            mask_applied: out.diagnostics.mask_applied,
            median_px: out.diagnostics.stage_errors.last().and_then(|s| s.median_px),
        })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let errors: Vec<SampleErrors> = records.iter().map(SampleRecord::errors).collect();
    let diameter = object.diameter();
    Ok(BenchReport {
        mode: cfg.bench.mode,
        diameter,
        r_so,
        auto_filter,
        metrics: summarize(&errors, diameter, &cfg.metrics)?,
        samples: records,
    })
}

/// Writes `report.json`, the one-row `metrics.csv` and the per-sample `samples.csv`.
pub fn write_report(report: &BenchReport, out_dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let json_path = out_dir.join("report.json");
    write_json(&json_path, report)?;

    let metrics_path = out_dir.join("metrics.csv");
    let (head, row) = report.metrics.csv_columns();
    write_csv(&metrics_path, |w| {
        w.write_record(&head)?;
        w.write_record(&row)
    })?;

    let samples_path = out_dir.join("samples.csv");
    write_csv(&samples_path, |w| {
        for r in &report.samples {
            w.serialize(r)?;
        }
        Ok(())
    })?;
    Ok(vec![json_path, metrics_path, samples_path])
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn write_csv(path: &Path, body: impl FnOnce(&mut csv::Writer<fs::File>) -> csv::Result<()>) -> Result<()> {
    let wrap = |source| Error::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut w = csv::Writer::from_path(path).map_err(wrap)?;
    body(&mut w).map_err(wrap)?;
    w.flush().map_err(|e| Error::io(path, e))
}
