//! One record holding every default of a run, loadable from JSON.

use std::path::{Path, PathBuf};

use bitloc_core::codes::GridSpec;
use bitloc_core::geometry::CameraIntrinsics;
use bitloc_core::metrics::{MetricsConfig, SymmetrySpec};
use bitloc_core::solver::SolverConfig;
use bitloc_net::backbone::BackboneConfig;
use bitloc_net::graphnet::StagePlan;
use bitloc_net::model::NetConfig;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Random object poses: uniform rotation, translation in an axis-aligned box (meters).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PoseSampler {
    pub xy_range: [f64; 2],
    pub z_range: [f64; 2],
}

impl Default for PoseSampler {
    fn default() -> Self {
        Self {
            xy_range: [-0.1, 0.1],
            z_range: [0.8, 1.2],
        }
    }
}

/// Corruption applied to codes and correspondences.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseModel {
    /// Probability of flipping each eligible bit of a visible keypoint.
    pub bit_flip_prob: f64,
    /// Only the leading `flip_levels` bits of each axis may flip; `None` means all.
    pub flip_levels: Option<u32>,
    /// Probability of moving a visible keypoint to a uniformly random cell.
    pub outlier_prob: f64,
    /// Gaussian noise added to decoded 2D points, in full-image pixels.
    pub pixel_noise_sigma: f64,
}

impl Default for NoiseModel {
    fn default() -> Self {
        Self::clean()
    }
}

impl NoiseModel {
    pub fn clean() -> Self {
        Self {
            bit_flip_prob: 0.0,
            flip_levels: None,
            outlier_prob: 0.0,
            pixel_noise_sigma: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let prob = |p: f64| (0.0..=1.0).contains(&p);
        if !prob(self.bit_flip_prob) || !prob(self.outlier_prob) {
            return Err(Error::config("noise probabilities must lie in [0, 1]"));
        }
        if !(self.pixel_noise_sigma >= 0.0 && self.pixel_noise_sigma.is_finite()) {
            return Err(Error::config("pixel noise sigma must be finite and nonnegative"));
        }
        if self.flip_levels == Some(0) {
            return Err(Error::config("flip_levels must be at least 1"));
        }
        Ok(())
    }

    pub fn is_clean(&self) -> bool {
        self.bit_flip_prob == 0.0 && self.outlier_prob == 0.0 && self.pixel_noise_sigma == 0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ObjectSpec {
    /// Ellipsoid meshed from a subdivided icosphere; the rendering surface
    /// uses a finer subdivision of the same sphere.
    Ellipsoid {
        semi_axes: [f64; 3],
        mesh_level: u32,
        surface_level: u32,
    },
    /// Triangle mesh from a PLY or OBJ file, rendered from area-weighted surface samples.
    Mesh { path: PathBuf, surface_samples: usize },
}

impl Default for ObjectSpec {
    fn default() -> Self {
        ObjectSpec::Ellipsoid {
            semi_axes: [0.1, 0.075, 0.06],
            mesh_level: 3,
            surface_level: 6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObjectConfig {
    pub shape: ObjectSpec,
    pub symmetry: SymmetrySpec,
    pub textureless: bool,
}

impl Default for ObjectConfig {
    fn default() -> Self {
        Self {
            shape: ObjectSpec::default(),
            symmetry: SymmetrySpec::None,
            textureless: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverKind {
    Epnp,
    Ransac,
    /// The spatial-coherence solver.
    Progx,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskPolicy {
    /// Filter by the visible mask when the object's self-occlusion profile calls for it.
    Auto,
    Always,
    Never,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InferenceMode {
    /// Ground-truth codes (optionally corrupted) stand in for the network.
    Oracle,
    Network,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub solver: SolverKind,
    pub mask_policy: MaskPolicy,
    pub noise: NoiseModel,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            solver: SolverKind::Progx,
            mask_policy: MaskPolicy::Auto,
            noise: NoiseModel::clean(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub scenes: usize,
    pub mode: InferenceMode,
    /// Network weights for `mode = network`.
    pub checkpoint: Option<PathBuf>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            scenes: 200,
            mode: InferenceMode::Oracle,
            checkpoint: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub nodes: usize,
    pub knn: usize,
    pub train_scenes: usize,
    pub test_scenes: usize,
    pub steps: usize,
    /// Steps of phase 1 (visibility, coarse bits and masks only).
    pub pretrain_steps: usize,
    pub batch: usize,
    pub lr_pretrain: f64,
    pub lr: f64,
    pub eval_interval: usize,
    /// Fuse refinement patches at ground-truth prefix cells during training.
    pub teacher_forcing: bool,
    /// Randomly rotate training RoIs by multiples of 90° (labels rotate with them).
    pub augment: bool,
    pub backbone: BackboneConfig,
    pub plan: StagePlan,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            nodes: 64,
            knn: 20,
            train_scenes: 200,
            test_scenes: 50,
            steps: 5000,
            pretrain_steps: 1000,
            batch: 8,
            lr_pretrain: 1e-3,
            lr: 5e-4,
            eval_interval: 250,
            teacher_forcing: true,
            augment: true,
            backbone: BackboneConfig::default(),
            plan: StagePlan::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub grid: GridSpec,
    /// Keypoints sampled for benchmarks and solver experiments.
    pub keypoints: usize,
    pub knn: usize,
    pub intrinsics: CameraIntrinsics,
    pub pose: PoseSampler,
    pub object: ObjectConfig,
    pub solver: SolverConfig,
    pub pipeline: PipelineConfig,
    pub bench: BenchConfig,
    pub train: TrainConfig,
    pub metrics: MetricsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            grid: GridSpec::default(),
            keypoints: 512,
            knn: 20,
            intrinsics: default_intrinsics(),
            pose: PoseSampler::default(),
            object: ObjectConfig::default(),
            solver: SolverConfig::default(),
            pipeline: PipelineConfig::default(),
            bench: BenchConfig::default(),
            train: TrainConfig::default(),
            metrics: MetricsConfig::default(),
        }
    }
}

/// The 640×480 camera used by the LINEMOD renderings.
pub fn default_intrinsics() -> CameraIntrinsics {
    CameraIntrinsics {
        fx: 572.4114,
        fy: 573.5704,
        cx: 325.2611,
        cy: 242.0490,
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: RunConfig = serde_json::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn net_config(&self) -> NetConfig {
        NetConfig {
            grid: self.grid,
            nodes: self.train.nodes,
            backbone: self.train.backbone.clone(),
            plan: self.train.plan.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate().map_err(|e| Error::config(e.to_string()))?;
        self.intrinsics.validate().map_err(|e| Error::config(e.to_string()))?;
        self.solver.validate().map_err(|e| Error::config(e.to_string()))?;
        self.pipeline.noise.validate()?;
        self.object.symmetry.validate().map_err(|e| Error::config(e.to_string()))?;
        if self.keypoints < 4 {
            return Err(Error::config("at least 4 keypoints are needed to solve for a pose"));
        }
        if self.knn == 0 || self.knn >= self.keypoints {
            return Err(Error::config(format!("knn = {} must lie in 1..{}", self.knn, self.keypoints)));
        }
        let [x0, x1] = self.pose.xy_range;
        let [z0, z1] = self.pose.z_range;
        if !(x0 <= x1 && z0 <= z1 && z0 > 0.0) {
            return Err(Error::config("pose ranges must be ordered with positive depth"));
        }
        let t = &self.train;
        if t.knn == 0 || t.knn >= t.nodes {
            return Err(Error::config(format!("train.knn = {} must lie in 1..{}", t.knn, t.nodes)));
        }
        if t.batch == 0 || t.pretrain_steps > t.steps || t.eval_interval == 0 {
            return Err(Error::config("training needs batch ≥ 1, eval_interval ≥ 1 and pretrain_steps ≤ steps"));
        }
        if !(t.lr > 0.0 && t.lr_pretrain > 0.0) {
            return Err(Error::config("learning rates must be positive"));
        }
        t.backbone.validate(&self.grid).map_err(|e| Error::config(e.to_string()))?;
        t.plan.validate().map_err(|e| Error::config(e.to_string()))?;
        if let ObjectSpec::Ellipsoid { semi_axes, surface_level, mesh_level } = &self.object.shape {
            if !semi_axes.iter().all(|a| *a > 0.0 && a.is_finite()) || surface_level < mesh_level {
                return Err(Error::config("ellipsoid needs positive semi-axes and surface_level ≥ mesh_level"));
            }
        }
        Ok(())
    }
}
