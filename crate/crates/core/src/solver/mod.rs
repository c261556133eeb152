//! Pose recovery from 3D-2D correspondences.
//!
//! [`epnp`] is the minimal/least-squares solver. [`ransac_pnp`] wraps it in a
//! seeded RANSAC loop and [`spatial_coherence_solve`] additionally requires
//! each inlier to be backed by a majority of its 3D neighbors, which rejects
//! isolated correspondences whose decoded location jumped across the grid.

mod epnp;

use nalgebra::{Point2, Point3};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codes::{CellIndex, GridSpec};
use crate::error::{Error, Result};
use crate::geometry::{build_knn_graph, CameraIntrinsics, Pose, RoiTransform};

pub use epnp::epnp_pose;

/// Paired object-frame points and image pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrespondenceSet {
    pub points3d: Vec<Point3<f64>>,
    pub points2d: Vec<Point2<f64>>,
    pub valid: Vec<bool>,
    /// Grid cell each 2D point was decoded from, when known.
    pub cells: Option<Vec<CellIndex>>,
}

impl CorrespondenceSet {
    pub fn new(points3d: Vec<Point3<f64>>, points2d: Vec<Point2<f64>>) -> Result<Self> {
        let n = points3d.len();
        Self::with_validity(points3d, points2d, vec![true; n])
    }

    pub fn with_validity(
        points3d: Vec<Point3<f64>>,
        points2d: Vec<Point2<f64>>,
        valid: Vec<bool>,
    ) -> Result<Self> {
        if points3d.len() != points2d.len() || points3d.len() != valid.len() {
            return Err(Error::invalid(format!(
                "correspondence arrays differ in length ({}, {}, {})",
                points3d.len(),
                points2d.len(),
                valid.len()
            )));
        }
        Ok(Self {
            points3d,
            points2d,
            valid,
            cells: None,
        })
    }

    pub fn with_cells(mut self, cells: Vec<CellIndex>) -> Result<Self> {
        if cells.len() != self.len() {
            return Err(Error::invalid("cell list length differs from correspondences"));
        }
        self.cells = Some(cells);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.points3d.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points3d.is_empty()
    }

    pub fn valid_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.valid[i]).collect()
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    /// Inlier threshold on reprojection error, in full-image pixels.
    pub reproj_threshold: f64,
    pub ransac_iters: usize,
    pub progx_iters: usize,
    pub min_inliers: usize,
    pub seed: u64,
    /// 3D neighbors consulted by the spatial-coherence confirmation.
    pub coherence_neighbors: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            reproj_threshold: 2.0,
            ransac_iters: 150,
            progx_iters: 400,
            min_inliers: 6,
            seed: 0,
            coherence_neighbors: 5,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.reproj_threshold > 0.0)
            || self.ransac_iters == 0
            || self.progx_iters == 0
            || self.min_inliers == 0
            || self.coherence_neighbors == 0
        {
            return Err(Error::invalid(format!("solver config needs positive values: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoseEstimate {
    pub pose: Pose,
    /// Reprojection error ≤ threshold under `pose` (always false for invalid pairs).
    pub inliers: Vec<bool>,
    /// Pairs the final refit used (the confirmed inliers for the coherence solver).
    pub support: Vec<bool>,
    /// Mean reprojection error over `inliers`, in pixels.
    pub mean_error: f64,
}

impl PoseEstimate {
    pub fn inlier_count(&self) -> usize {
        self.inliers.iter().filter(|&&b| b).count()
    }
}

/// Pixel reprojection error of one pair; infinite behind the camera.
pub fn reprojection_error(
    pose: &Pose,
    intr: &CameraIntrinsics,
    p3: &Point3<f64>,
    p2: &Point2<f64>,
) -> f64 {
    match intr.project_camera_point(&pose.transform(p3)) {
        Some(uv) => (uv - p2).norm(),
        None => f64::INFINITY,
    }
}

/// EPnP over all valid pairs.
pub fn epnp(corrs: &CorrespondenceSet, intr: &CameraIntrinsics) -> Result<Pose> {
    let idx = corrs.valid_indices();
    solve_subset(corrs, intr, &idx)
}

fn solve_subset(corrs: &CorrespondenceSet, intr: &CameraIntrinsics, idx: &[usize]) -> Result<Pose> {
    let world: Vec<Point3<f64>> = idx.iter().map(|&i| corrs.points3d[i]).collect();
    let image: Vec<Point2<f64>> = idx.iter().map(|&i| corrs.points2d[i]).collect();
    epnp_pose(&world, &image, intr)
}

struct Scored {
    pose: Pose,
    flags: Vec<bool>,
    count: usize,
    mean: f64,
}

fn score_inliers(
    corrs: &CorrespondenceSet,
    intr: &CameraIntrinsics,
    pose: Pose,
    threshold: f64,
) -> (Vec<bool>, Vec<f64>) {
    let errors: Vec<f64> = (0..corrs.len())
        .map(|i| {
            if corrs.valid[i] {
                reprojection_error(&pose, intr, &corrs.points3d[i], &corrs.points2d[i])
            } else {
                f64::INFINITY
            }
        })
        .collect();
    let flags = errors.iter().map(|&e| e <= threshold).collect();
    (flags, errors)
}

fn summarize(pose: Pose, flags: Vec<bool>, errors: &[f64]) -> Scored {
    let (count, total) = flags
        .iter()
        .zip(errors)
        .filter(|(f, _)| **f)
        .fold((0usize, 0.0), |(c, t), (_, e)| (c + 1, t + e));
    let mean = if count > 0 { total / count as f64 } else { f64::INFINITY };
    Scored {
        pose,
        flags,
        count,
        mean,
    }
}

/// Degenerate minimal samples: 3D points (nearly) collinear or coincident.
fn sample_is_degenerate(points: &[Point3<f64>]) -> bool {
    let a = points[0];
    let span = points
        .iter()
        .map(|p| (p - a).norm())
        .fold(0.0f64, f64::max);
    if span <= 0.0 {
        return true;
    }
    let dir = points
        .iter()
        .map(|p| p - a)
        .max_by(|x, y| x.norm().total_cmp(&y.norm()))
        .expect("nonempty")
        .normalize();
    let off_line = points
        .iter()
        .map(|p| (p - a).cross(&dir).norm())
        .fold(0.0f64, f64::max);
    off_line < 1e-6 * span
}

/// Seeded minimal samples, drawn up front so the result does not depend on
/// how hypotheses are evaluated.
fn draw_samples(corrs: &CorrespondenceSet, valid: &[usize], iters: usize, seed: u64) -> Vec<[usize; 4]> {
    const MAX_RESAMPLE: usize = 100;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(iters);
    for _ in 0..iters {
        for _ in 0..MAX_RESAMPLE {
            let pick = sample(&mut rng, valid.len(), 4);
            let s = [valid[pick.index(0)], valid[pick.index(1)], valid[pick.index(2)], valid[pick.index(3)]];
            let pts: Vec<Point3<f64>> = s.iter().map(|&i| corrs.points3d[i]).collect();
            if !sample_is_degenerate(&pts) {
                out.push(s);
                break;
            }
        }
    }
    out
}

/// Majority of the `m` nearest 3D neighbors must also be inliers.
fn confirm(inliers: &[bool], neighbors: &[Vec<usize>], valid: &[usize], total: usize) -> Vec<bool> {
    let mut confirmed = vec![false; total];
    for (local, &i) in valid.iter().enumerate() {
        if !inliers[i] {
            continue;
        }
        let nb = &neighbors[local];
        let agreeing = nb.iter().filter(|&&l| inliers[valid[l]]).count();
        confirmed[i] = 2 * agreeing > nb.len();
    }
    confirmed
}

fn is_better(cand: &Scored, best: &Option<Scored>) -> bool {
    match best {
        None => true,
        Some(b) => cand.count > b.count || (cand.count == b.count && cand.mean < b.mean),
    }
}

/// RANSAC over 4-point EPnP hypotheses with a final EPnP refit on the inliers.
pub fn ransac_pnp(
    corrs: &CorrespondenceSet,
    intr: &CameraIntrinsics,
    cfg: &SolverConfig,
) -> Result<PoseEstimate> {
    robust_solve(corrs, intr, cfg, false)
}

/// RANSAC with neighborhood confirmation: an inlier counts only if most of
/// its `coherence_neighbors` nearest valid 3D neighbors are inliers too.
pub fn spatial_coherence_solve(
    corrs: &CorrespondenceSet,
    intr: &CameraIntrinsics,
    cfg: &SolverConfig,
) -> Result<PoseEstimate> {
    robust_solve(corrs, intr, cfg, true)
}

fn robust_solve(
    corrs: &CorrespondenceSet,
    intr: &CameraIntrinsics,
    cfg: &SolverConfig,
    coherent: bool,
) -> Result<PoseEstimate> {
    cfg.validate()?;
    let valid = corrs.valid_indices();
    if valid.len() < 4 {
        return Err(Error::InsufficientData {
            needed: 4,
            got: valid.len(),
        });
    }
    let neighbors: Vec<Vec<usize>> = if coherent {
        let pts: Vec<Point3<f64>> = valid.iter().map(|&i| corrs.points3d[i]).collect();
        build_knn_graph(&pts, cfg.coherence_neighbors)?.adjacency().to_vec()
    } else {
        Vec::new()
    };
    let support_of = |flags: Vec<bool>| {
        if coherent {
            confirm(&flags, &neighbors, &valid, corrs.len())
        } else {
            flags
        }
    };

    let iters = if coherent { cfg.progx_iters } else { cfg.ransac_iters };
    let mut best: Option<Scored> = None;
    for s in draw_samples(corrs, &valid, iters, cfg.seed) {
        let Ok(pose) = solve_subset(corrs, intr, &s) else {
            continue;
        };
        let (flags, errors) = score_inliers(corrs, intr, pose, cfg.reproj_threshold);
        let cand = summarize(pose, support_of(flags), &errors);
        if is_better(&cand, &best) {
            best = Some(cand);
        }
    }
    let best = match best {
        Some(b) if b.count >= cfg.min_inliers => b,
        other => {
            return Err(Error::NoConsensus {
                best: other.map_or(0, |b| b.count),
                needed: cfg.min_inliers,
            })
        }
    };

    let support: Vec<usize> = (0..corrs.len()).filter(|&i| best.flags[i]).collect();
    let mut pose = best.pose;
    if let Ok(refit) = solve_subset(corrs, intr, &support) {
        let (flags, errors) = score_inliers(corrs, intr, refit, cfg.reproj_threshold);
        if summarize(refit, support_of(flags), &errors).count >= best.count {
            pose = refit;
        }
    }
    let (inliers, errors) = score_inliers(corrs, intr, pose, cfg.reproj_threshold);
    let scored = summarize(pose, inliers, &errors);
    Ok(PoseEstimate {
        pose,
        inliers: scored.flags,
        support: best.flags,
        mean_error: scored.mean,
    })
}

/// Binary `2^d × 2^d` mask over the RoI grid, row-major (`y * side + x`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GridMask {
    pub side: u32,
    pub data: Vec<bool>,
}

impl GridMask {
    pub fn new(side: u32, data: Vec<bool>) -> Result<Self> {
        if data.len() != (side * side) as usize {
            return Err(Error::invalid(format!(
                "mask has {} entries, expected {}",
                data.len(),
                side * side
            )));
        }
        Ok(Self { side, data })
    }

    pub fn filled(side: u32, value: bool) -> Self {
        Self {
            side,
            data: vec![value; (side * side) as usize],
        }
    }

    pub fn get(&self, ix: u32, iy: u32) -> bool {
        ix < self.side && iy < self.side && self.data[(iy * self.side + ix) as usize]
    }

    pub fn set(&mut self, ix: u32, iy: u32, value: bool) {
        self.data[(iy * self.side + ix) as usize] = value;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }
}

/// Invalidates pairs whose cell is 0 in `mask`.
///
/// The cell is the pair's source cell when known; otherwise the 2D point is
/// mapped into the RoI through `roi` (or taken as RoI coordinates when `roi`
/// is `None`). Points outside the RoI count as masked out.
pub fn mask_filter(
    corrs: &CorrespondenceSet,
    mask: &GridMask,
    grid: &GridSpec,
    roi: Option<&RoiTransform>,
) -> Result<CorrespondenceSet> {
    let side = grid.cells(grid.depth);
    if mask.side != side {
        return Err(Error::invalid(format!(
            "mask side {} does not match grid side {side}",
            mask.side
        )));
    }
    let cell_size = grid.cell_size(grid.depth);
    let mut out = corrs.clone();
    for i in 0..corrs.len() {
        if !corrs.valid[i] {
            continue;
        }
        let keep = match &corrs.cells {
            Some(cells) if cells[i].level == grid.depth => mask.get(cells[i].ix, cells[i].iy),
            _ => {
                let q = roi.map_or(corrs.points2d[i], |t| t.to_roi(&corrs.points2d[i]));
                let (fx, fy) = ((q.x / cell_size).floor(), (q.y / cell_size).floor());
                fx >= 0.0 && fy >= 0.0 && mask.get(fx as u32, fy as u32)
            }
        };
        out.valid[i] = keep;
    }
    Ok(out)
}
