//! End-to-end inference: codes, decoding, optional mask filtering and pose solving.

use bitloc_core::codes::{prefix_cell, BinaryCodeSet, CellIndex, GridSpec};
use bitloc_core::geometry::{CameraIntrinsics, KnnGraph, Pose, RoiTransform};
use bitloc_core::solver::{
    epnp, mask_filter, ransac_pnp, spatial_coherence_solve, CorrespondenceSet, GridMask, SolverConfig,
};
use bitloc_net::model::PoseNet;
use bitloc_net::tensor::FeatureMap;
use nalgebra::{Point2, Point3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{MaskPolicy, PipelineConfig, SolverKind};
use crate::error::Result;
use crate::noise::{add_pixel_noise, corrupt_codes};
use crate::scene::SceneSample;

/// Where the keypoint codes come from.
#[derive(Debug, Clone, Copy)]
pub enum CodeSource<'a> {
    /// Ground-truth codes passed through the noise model; the ground-truth
    /// visible mask stands in for the predicted one.
    Oracle,
    /// A trained network run on the rendered RoI.
    Network { net: &'a PoseNet, graph: &'a KnnGraph },
}

/// Everything inference needs besides the scene itself.
#[derive(Debug, Clone)]
pub struct Pipeline<'a> {
    pub keypoints: &'a [Point3<f64>],
    pub intrinsics: CameraIntrinsics,
    pub grid: GridSpec,
    pub solver: SolverConfig,
    pub config: PipelineConfig,
    /// Decision of the self-occlusion rule, used by [`MaskPolicy::Auto`].
    pub auto_filter: bool,
}

/// Median localization error after decoding the first `level` bits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageError {
    pub level: u32,
    /// In RoI pixels; `None` when no keypoint is visible in the ground truth.
    pub median_px: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    /// Keypoints whose code says they project inside the RoI.
    pub predicted_visible: usize,
    /// Correspondences that reached the solver.
    pub used: usize,
    pub mask_applied: bool,
    pub inliers: Option<usize>,
    pub stage_errors: Vec<StageError>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Inference {
    pub pose: Option<Pose>,
    /// Solver error for a failed sample.
    pub failure: Option<String>,
    pub codes: BinaryCodeSet,
    pub diagnostics: Diagnostics,
}

/// Distance from each ground-truth-visible keypoint's decoded level-`level`
/// cell center to its exact RoI projection. The predicted visibility bit is ignored.
pub fn localization_errors(
    codes: &BinaryCodeSet,
    sample: &SceneSample,
    grid: &GridSpec,
    level: u32,
) -> Result<Vec<f64>> {
    let mut errors = Vec::new();
    for ((pred, gt), q) in codes.codes.iter().zip(&sample.gt_codes.codes).zip(&sample.roi_points) {
        if gt.visible {
            errors.push((prefix_cell(pred, level)?.center(grid) - q).norm());
        }
    }
    Ok(errors)
}

/// Median of finite values; `None` for an empty slice.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { (v[n / 2 - 1] + v[n / 2]) / 2.0 })
}

/// Correspondences from codes: invisible codes are dropped, visible ones are
/// decoded to cell centers and mapped back to full-image pixels.
pub fn correspondences(
    codes: &BinaryCodeSet,
    keypoints: &[Point3<f64>],
    sample: &SceneSample,
    grid: &GridSpec,
) -> Result<CorrespondenceSet> {
    correspondences_in(codes, keypoints, &sample.roi, grid)
}

fn correspondences_in(
    codes: &BinaryCodeSet,
    keypoints: &[Point3<f64>],
    roi: &RoiTransform,
    grid: &GridSpec,
) -> Result<CorrespondenceSet> {
    let cells: Vec<CellIndex> = codes.codes.iter().map(|c| c.cell()).collect();
    let points: Vec<Point2<f64>> = cells.iter().map(|c| roi.from_roi(&c.center(grid))).collect();
    let valid = codes.codes.iter().map(|c| c.visible).collect();
    Ok(CorrespondenceSet::with_validity(keypoints.to_vec(), points, valid)?.with_cells(cells)?)
}

impl Pipeline<'_> {
    pub fn filter_enabled(&self) -> bool {
        match self.config.mask_policy {
            MaskPolicy::Always => true,
            MaskPolicy::Never => false,
            MaskPolicy::Auto => self.auto_filter,
        }
    }

    /// Runs the whole chain on one scene. Solver failures are reported in the
    /// result rather than returned as errors.
    pub fn infer(&self, sample: &SceneSample, source: CodeSource<'_>, seed: u64) -> Result<Inference> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (codes, visible_mask) = match source {
            CodeSource::Oracle => (
                corrupt_codes(&sample.gt_codes, &self.config.noise, &mut rng),
                sample.gt_masks.visible.clone(),
            ),
            CodeSource::Network { net, graph } => predict_codes(net, graph, &sample.image)?,
        };
        let stage_errors = (self.grid.base_depth..=self.grid.depth)
            .map(|level| {
                Ok(StageError {
                    level,
                    median_px: median(&localization_errors(&codes, sample, &self.grid, level)?),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let mut inference = self.solve(codes, &visible_mask, &sample.roi, &mut rng)?;
        inference.diagnostics.stage_errors = stage_errors;
        Ok(inference)
    }

    /// Runs a trained network on a RoI image without ground truth. `roi`
    /// places the image in the full camera frame.
    pub fn infer_image(
        &self,
        image: &FeatureMap,
        roi: &RoiTransform,
        net: &PoseNet,
        graph: &KnnGraph,
        seed: u64,
    ) -> Result<Inference> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (codes, visible_mask) = predict_codes(net, graph, image)?;
        self.solve(codes, &visible_mask, roi, &mut rng)
    }

    fn solve(&self, codes: BinaryCodeSet, visible_mask: &GridMask, roi: &RoiTransform, rng: &mut ChaCha8Rng) -> Result<Inference> {
        let mut set = correspondences_in(&codes, self.keypoints, roi, &self.grid)?;
        add_pixel_noise(&mut set.points2d, self.config.noise.pixel_noise_sigma, rng);
        let mask_applied = self.filter_enabled();
        if mask_applied {
            set = mask_filter(&set, visible_mask, &self.grid, Some(roi))?;
        }
        let solved = match self.config.solver {
            SolverKind::Epnp => epnp(&set, &self.intrinsics).map(|p| (p, None)),
            SolverKind::Ransac => ransac_pnp(&set, &self.intrinsics, &self.solver).map(|e| (e.pose, Some(e.inlier_count()))),
            SolverKind::Progx => {
                spatial_coherence_solve(&set, &self.intrinsics, &self.solver).map(|e| (e.pose, Some(e.inlier_count())))
            }
        };
        let (pose, inliers, failure) = match solved {
            Ok((pose, inliers)) => (Some(pose), inliers, None),
            Err(e) => (None, None, Some(e.to_string())),
        };
        Ok(Inference {
            pose,
            failure,
            diagnostics: Diagnostics {
                predicted_visible: codes.codes.iter().filter(|c| c.visible).count(),
                used: set.valid_count(),
                mask_applied,
                inliers,
                stage_errors: Vec::new(),
            },
            codes,
        })
    }
}

/// Hardened network codes and the visible mask thresholded at 0.5.
fn predict_codes(net: &PoseNet, graph: &KnnGraph, image: &FeatureMap) -> Result<(BinaryCodeSet, GridMask)> {
    let pred = net.predict(image, graph)?;
    let data = pred.masks.visible.iter().map(|p| *p >= 0.5).collect();
    Ok((pred.codes, GridMask::new(pred.masks.side as u32, data)?))
}
