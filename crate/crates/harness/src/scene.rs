//! Synthetic scenes: a posed object, its RoI, the rendered coordinate image
//! and exact ground truth.

use std::collections::HashMap;

use bitloc_core::codes::{encode_projection, BinaryCodeSet, GridSpec};
use bitloc_core::geometry::{CameraIntrinsics, Pose, RoiTransform};
use bitloc_core::solver::GridMask;
use bitloc_core::visibility::hpr_visible;
use bitloc_net::tensor::FeatureMap;
use nalgebra::{Point2, Point3, Quaternion, UnitQuaternion, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::config::PoseSampler;
use crate::error::{Error, Result};
use crate::object::SceneObject;

/// Pose draws allowed before generation gives up.
pub const MAX_ATTEMPTS: usize = 100;
/// Padding applied to the tight projected bounding box.
pub const BBOX_PADDING: f64 = 0.1;
/// Side of the square splat drawn for each surface point, in RoI pixels.
const SPLAT: isize = 3;

/// Binary ground-truth masks on the finest code grid.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneMasks {
    pub full: GridMask,
    pub visible: GridMask,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSample {
    pub seed: u64,
    pub pose: Pose,
    pub roi: RoiTransform,
    pub gt_codes: BinaryCodeSet,
    pub gt_masks: SceneMasks,
    /// Normalized object coordinates of the visible surface, zero background.
    pub image: FeatureMap,
    /// Exact keypoint projections in full-image pixels.
    pub projections: Vec<Point2<f64>>,
    /// The same projections in RoI pixels.
    pub roi_points: Vec<Point2<f64>>,
    /// Keypoints not hidden by the object itself, by Hidden Point Removal from the camera.
    pub self_visible: Vec<bool>,
}

/// Rotation drawn uniformly from SO(3) via a normalized Gaussian quaternion.
pub fn random_rotation(rng: &mut ChaCha8Rng) -> nalgebra::Matrix3<f64> {
    let q: [f64; 4] = std::array::from_fn(|_| rng.sample(StandardNormal));
    UnitQuaternion::from_quaternion(Quaternion::new(q[0], q[1], q[2], q[3]))
        .to_rotation_matrix()
        .into_inner()
}

pub fn sample_pose(sampler: &PoseSampler, rng: &mut ChaCha8Rng) -> Result<Pose> {
    let rotation = random_rotation(rng);
    let [x0, x1] = sampler.xy_range;
    let [z0, z1] = sampler.z_range;
    let mut uniform = |lo: f64, hi: f64| if lo < hi { rng.gen_range(lo..hi) } else { lo };
    let translation = Vector3::new(uniform(x0, x1), uniform(x0, x1), uniform(z0, z1));
    Ok(Pose::new(Pose::orthonormalize(&rotation), translation)?)
}

/// Square RoI around the projected vertices, padded by [`BBOX_PADDING`].
pub fn roi_for(pixels: &[Point2<f64>], roi_size: u32) -> Result<RoiTransform> {
    let mut lo = Vector2::repeat(f64::INFINITY);
    let mut hi = Vector2::repeat(f64::NEG_INFINITY);
    for p in pixels {
        lo = lo.inf(&p.coords);
        hi = hi.sup(&p.coords);
    }
    let size = (hi - lo).max() * (1.0 + BBOX_PADDING);
    let center = (lo + hi) / 2.0;
    Ok(RoiTransform::new(
        Point2::from(center - Vector2::repeat(size / 2.0)),
        Vector2::repeat(size),
        roi_size,
    )?)
}

fn cell_of(q: &Point2<f64>, grid: &GridSpec) -> Option<(u32, u32)> {
    let size = grid.roi_size as f64;
    if !(0.0..size).contains(&q.x) || !(0.0..size).contains(&q.y) {
        return None;
    }
    let side = grid.cells(grid.depth);
    let cell = grid.cell_size(grid.depth);
    Some((((q.x / cell) as u32).min(side - 1), ((q.y / cell) as u32).min(side - 1)))
}

/// Generates one scene from its seed.
pub fn generate_scene(
    object: &SceneObject,
    keypoints: &[Point3<f64>],
    intr: &CameraIntrinsics,
    sampler: &PoseSampler,
    grid: &GridSpec,
    seed: u64,
) -> Result<SceneSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let in_front = |pose: &Pose| {
        object
            .surface
            .iter()
            .chain(object.model.vertices())
            .chain(keypoints)
            .all(|p| pose.transform(p).z > 0.0)
    };
    let pose = (0..MAX_ATTEMPTS)
        .map(|_| sample_pose(sampler, &mut rng))
        .find(|p| p.as_ref().map_or(true, in_front))
        .ok_or_else(|| Error::Generation(format!("no pose in front of the camera after {MAX_ATTEMPTS} draws")))??;

    let project = |p: &Point3<f64>| intr.project_camera_point(&pose.transform(p)).expect("point is in front of the camera");
    let vertex_px: Vec<Point2<f64>> = object.model.vertices().iter().map(project).collect();
    let roi = roi_for(&vertex_px, grid.roi_size)?;

    let projections: Vec<Point2<f64>> = keypoints.iter().map(project).collect();
    let roi_points: Vec<Point2<f64>> = projections.iter().map(|p| roi.to_roi(p)).collect();
    let codes = roi_points.iter().map(|q| encode_projection(q, grid)).collect::<bitloc_core::Result<Vec<_>>>()?;
    let gt_codes = BinaryCodeSet::new(grid.depth, codes)?;

    let surface_roi: Vec<Point2<f64>> = object.surface.iter().map(|p| roi.to_roi(&project(p))).collect();
    let image = render(object, &pose, &surface_roi, grid.roi_size as usize);

    // Hidden Point Removal over the surface together with the keypoints. A keypoint
    // that coincides with a surface point shares its entry.
    let eye = Point3::from(-(pose.rotation.transpose() * pose.translation));
    let key = |p: &Point3<f64>| [p.x.to_bits(), p.y.to_bits(), p.z.to_bits()];
    let index: HashMap<[u64; 3], usize> =
        object.surface.iter().enumerate().map(|(i, p)| (key(p), i)).collect();
    let mut cloud = object.surface.clone();
    let slots: Vec<usize> = keypoints
        .iter()
        .map(|p| match index.get(&key(p)) {
            Some(&i) => i,
            None => {
                cloud.push(*p);
                cloud.len() - 1
            }
        })
        .collect();
    let visible = hpr_visible(&cloud, &eye, None)?;
    let surface_vis = &visible[..object.surface.len()];
    let keypoint_vis: Vec<bool> = slots.iter().map(|&i| visible[i]).collect();

    let side = grid.cells(grid.depth);
    let mut full = GridMask::filled(side, false);
    let mut vis_mask = GridMask::filled(side, false);
    for (q, &v) in surface_roi.iter().zip(surface_vis) {
        if let Some((x, y)) = cell_of(q, grid) {
            full.set(x, y, true);
            if v {
                vis_mask.set(x, y, true);
            }
        }
    }
    for (q, &v) in roi_points.iter().zip(&keypoint_vis) {
        if let Some((x, y)) = cell_of(q, grid) {
            full.set(x, y, true);
            if v {
                vis_mask.set(x, y, true);
            }
        }
    }

    Ok(SceneSample {
        seed,
        pose,
        roi,
        gt_codes,
        gt_masks: SceneMasks {
            full,
            visible: vis_mask,
        },
        image,
        projections,
        roi_points,
        self_visible: keypoint_vis,
    })
}

/// Z-buffered splatting of the surface's normalized coordinates; the nearest point wins.
fn render(object: &SceneObject, pose: &Pose, surface_roi: &[Point2<f64>], size: usize) -> FeatureMap {
    let mut image = FeatureMap::zeros(3, size, size);
    let mut depth = vec![f64::INFINITY; size * size];
    let r = SPLAT / 2;
    for (p, q) in object.surface.iter().zip(surface_roi) {
        let z = pose.transform(p).z;
        let color = object.normalized_coords(p);
        let (cx, cy) = (q.x.floor() as isize, q.y.floor() as isize);
        for dy in -r..=r {
            for dx in -r..=r {
                let (x, y) = (cx + dx, cy + dy);
                if x < 0 || y < 0 || x >= size as isize || y >= size as isize {
                    continue;
                }
                let idx = y as usize * size + x as usize;
                if z < depth[idx] {
                    depth[idx] = z;
                    for (c, v) in color.iter().enumerate() {
                        image.data[c * size * size + idx] = *v;
                    }
                }
            }
        }
    }
    image
}

/// Generates `count` scenes with seeds `seed_of(i)`, spread over the available cores.
pub fn generate_scenes(
    object: &SceneObject,
    keypoints: &[Point3<f64>],
    intr: &CameraIntrinsics,
    sampler: &PoseSampler,
    grid: &GridSpec,
    count: usize,
    seed_of: impl Fn(u64) -> u64 + Sync,
) -> Result<Vec<SceneSample>> {
    crate::parallel::map_indexed(count, |i| generate_scene(object, keypoints, intr, sampler, grid, seed_of(i as u64)))
        .into_iter()
        .collect()
}

/// The same scene seen after rotating the RoI by 90° clockwise `quarter_turns`
/// times: pixel `(x, y)` moves to `(S − y, x)` and cell `(i, j)` to `(2^d − 1 − j, i)`.
pub fn rotate_quarter(sample: &SceneSample, quarter_turns: u32, grid: &GridSpec) -> SceneSample {
    let mut out = sample.clone();
    for _ in 0..quarter_turns % 4 {
        out = rotate_once(&out, grid);
    }
    out
}

fn rotate_once(s: &SceneSample, grid: &GridSpec) -> SceneSample {
    let n = s.image.height;
    let mut image = FeatureMap::zeros(s.image.channels, n, n);
    for c in 0..s.image.channels {
        for y in 0..n {
            for x in 0..n {
                *image.at_mut(c, x, n - 1 - y) = s.image.at(c, y, x);
            }
        }
    }
    let rotate_mask = |m: &GridMask| {
        let side = m.side;
        let mut out = GridMask::filled(side, false);
        for y in 0..side {
            for x in 0..side {
                out.set(side - 1 - y, x, m.get(x, y));
            }
        }
        out
    };
    let size = grid.roi_size as f64;
    let mut codes = s.gt_codes.clone();
    for c in codes.codes.iter_mut().filter(|c| c.visible) {
        let x: Vec<bool> = c.y.iter().map(|b| !b).collect();
        c.y = std::mem::replace(&mut c.x, x);
    }
    SceneSample {
        image,
        gt_codes: codes,
        gt_masks: SceneMasks {
            full: rotate_mask(&s.gt_masks.full),
            visible: rotate_mask(&s.gt_masks.visible),
        },
        roi_points: s.roi_points.iter().map(|q| Point2::new(size - q.y, q.x)).collect(),
        ..s.clone()
    }
}
