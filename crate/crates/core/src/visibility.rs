//! Viewpoint sampling, Hidden Point Removal, and the self-occlusion ratio used
//! to decide whether correspondences should be filtered by the visible mask.

use std::collections::HashMap;

use nalgebra::{Point3, Vector3};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::ObjectModel;
use crate::hull;

/// Lower edge of the "easily self-occluded" visibility band (inclusive).
pub const BAND_LOW: f64 = 0.2;
/// Upper edge of the band (exclusive).
pub const BAND_HIGH: f64 = 0.4;
/// `r_so` at or above which a textureless object gets visible-mask filtering.
pub const FILTER_RATIO: f64 = 0.5;

/// Unit viewing directions on an icosphere.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewpointSet {
    pub directions: Vec<Vector3<f64>>,
    /// Camera distance from the object centroid, in object diameters.
    pub radius_factor: f64,
}

impl ViewpointSet {
    pub fn len(&self) -> usize {
        self.directions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.directions.is_empty()
    }
}

/// Number of icosphere vertices after `level` subdivisions.
pub fn icosphere_count(level: u32) -> usize {
    10 * 4usize.pow(level) + 2
}

/// Vertices of an icosahedron subdivided `level` times, projected to the unit
/// sphere. Level 4 gives 2562 directions.
pub fn sample_viewpoints(level: u32, radius_factor: f64) -> ViewpointSet {
    let (verts, _) = icosphere(level);
    ViewpointSet {
        directions: verts,
        radius_factor,
    }
}

/// Icosphere vertices and triangles.
pub fn icosphere(level: u32) -> (Vec<Vector3<f64>>, Vec<[usize; 3]>) {
    let t = (1.0 + 5f64.sqrt()) / 2.0;
    let mut verts: Vec<Vector3<f64>> = [
        (-1.0, t, 0.0),
        (1.0, t, 0.0),
        (-1.0, -t, 0.0),
        (1.0, -t, 0.0),
        (0.0, -1.0, t),
        (0.0, 1.0, t),
        (0.0, -1.0, -t),
        (0.0, 1.0, -t),
        (t, 0.0, -1.0),
        (t, 0.0, 1.0),
        (-t, 0.0, -1.0),
        (-t, 0.0, 1.0),
    ]
    .iter()
    .map(|&(x, y, z)| Vector3::new(x, y, z).normalize())
    .collect();
    let mut faces: Vec<[usize; 3]> = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];
    for _ in 0..level {
        let mut midpoints: HashMap<(usize, usize), usize> = HashMap::new();
        let mut mid = |a: usize, b: usize, verts: &mut Vec<Vector3<f64>>| {
            let key = (a.min(b), a.max(b));
            *midpoints.entry(key).or_insert_with(|| {
                verts.push(((verts[a] + verts[b]) / 2.0).normalize());
                verts.len() - 1
            })
        };
        let mut next = Vec::with_capacity(faces.len() * 4);
        for [a, b, c] in faces {
            let ab = mid(a, b, &mut verts);
            let bc = mid(b, c, &mut verts);
            let ca = mid(c, a, &mut verts);
            next.extend([[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]);
        }
        faces = next;
    }
    (verts, faces)
}

/// Katz-style Hidden Point Removal.
///
/// Points are expressed relative to `viewpoint`, spherically flipped about a
/// sphere of radius `radius` (default: 100 × the largest point distance), and
/// a point is visible iff its flipped image is a vertex of the convex hull of
/// the flipped set plus the viewpoint.
pub fn hpr_visible(
    points: &[Point3<f64>],
    viewpoint: &Point3<f64>,
    radius: Option<f64>,
) -> Result<Vec<bool>> {
    let rel: Vec<Vector3<f64>> = points.iter().map(|p| p - viewpoint).collect();
    let max_norm = rel.iter().map(|v| v.norm()).fold(0.0f64, f64::max);
    if rel.iter().any(|v| v.norm() == 0.0) {
        return Err(Error::invalid("viewpoint coincides with a point"));
    }
    let radius = radius.unwrap_or(100.0 * max_norm);
    if !(radius >= max_norm) {
        return Err(Error::invalid(format!(
            "flip radius {radius} is smaller than the farthest point distance {max_norm}"
        )));
    }
    let mut flipped: Vec<Point3<f64>> = rel
        .iter()
        .map(|v| {
            let n = v.norm();
            Point3::from(v + v * (2.0 * (radius - n) / n))
        })
        .collect();
    flipped.push(Point3::origin());
    let on_hull = hull::hull_vertex_indices(&flipped)?;
    let mut visible = vec![false; points.len()];
    for i in on_hull {
        if i < points.len() {
            visible[i] = true;
        }
    }
    Ok(visible)
}

/// Per-point visibility fractions and the self-occlusion ratio.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisibilityProfile {
    /// Model vertex index of each evaluated point.
    pub indices: Vec<usize>,
    /// Fraction of viewpoints from which each point is visible.
    pub v: Vec<f64>,
    pub r_so: f64,
}

impl VisibilityProfile {
    pub fn from_fractions(indices: Vec<usize>, v: Vec<f64>) -> Self {
        let r_so = self_occlusion_ratio(&v);
        Self { indices, v, r_so }
    }

    pub fn filter_decision(&self, textureless: bool) -> bool {
        filter_decision(self.r_so, textureless)
    }
}

/// Fraction of points with visibility in `[0.2, 0.4)`, over all points.
pub fn self_occlusion_ratio(v: &[f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    let in_band = v.iter().filter(|&&x| (BAND_LOW..BAND_HIGH).contains(&x)).count();
    in_band as f64 / v.len() as f64
}

/// Visible-mask filtering applies to textureless objects with `r_so ≥ 0.5`.
pub fn filter_decision(r_so: f64, textureless: bool) -> bool {
    textureless && r_so >= FILTER_RATIO
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VisibilityOptions {
    /// Models with more vertices are evaluated on a seeded random subset of this size.
    pub max_points: Option<usize>,
    /// Flip radius as a multiple of the farthest point distance from each viewpoint.
    pub radius_multiplier: f64,
    pub subsample_seed: u64,
}

impl Default for VisibilityOptions {
    fn default() -> Self {
        Self {
            max_points: Some(5000),
            radius_multiplier: 100.0,
            subsample_seed: 0,
        }
    }
}

/// HPR visibility of the model's vertices from every viewpoint.
pub fn visibility_profile(
    model: &ObjectModel,
    views: &ViewpointSet,
    opts: &VisibilityOptions,
) -> Result<VisibilityProfile> {
    if views.is_empty() {
        return Err(Error::invalid("no viewpoints"));
    }
    let n = model.len();
    let indices: Vec<usize> = match opts.max_points {
        Some(cap) if n > cap => {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.subsample_seed);
            let mut idx = sample(&mut rng, n, cap).into_vec();
            idx.sort_unstable();
            idx
        }
        _ => (0..n).collect(),
    };
    let points: Vec<Point3<f64>> = indices.iter().map(|&i| model.vertices()[i]).collect();
    let center = model.centroid();
    let distance = views.radius_factor * model.diameter();
    let mut counts = vec![0usize; points.len()];
    for dir in &views.directions {
        let eye = center + dir * distance;
        let max_norm = points.iter().map(|p| (p - eye).norm()).fold(0.0f64, f64::max);
        let vis = hpr_visible(&points, &eye, Some(opts.radius_multiplier * max_norm))?;
        for (c, v) in counts.iter_mut().zip(vis) {
            *c += v as usize;
        }
    }
    let v = counts
        .into_iter()
        .map(|c| c as f64 / views.len() as f64)
        .collect();
    Ok(VisibilityProfile::from_fractions(indices, v))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn unit_sphere_cloud() -> Vec<Point3<f64>> {
        icosphere(4).0.into_iter().map(Point3::from).collect()
    }

    #[test]
    fn icosphere_counts_and_norms() {
        for level in 0..=4 {
            let vs = sample_viewpoints(level, 3.0);
            assert_eq!(vs.len(), icosphere_count(level));
            assert!(vs.directions.iter().all(|d| (d.norm() - 1.0).abs() < 1e-9));
        }
        assert_eq!(sample_viewpoints(0, 3.0).len(), 12);
        let vs = sample_viewpoints(4, 3.0);
        assert_eq!(vs.len(), 2562);
        let mut min_gap = f64::INFINITY;
        for (i, a) in vs.directions.iter().enumerate() {
            for b in &vs.directions[i + 1..] {
                min_gap = min_gap.min((a - b).norm());
            }
        }
        assert!(min_gap > 1e-3);
        assert_eq!(sample_viewpoints(3, 3.0), sample_viewpoints(3, 3.0));
    }

    #[test]
    fn hpr_sphere_matches_hemisphere_oracle() {
        let pts = unit_sphere_cloud();
        let eye = Point3::new(0.0, 0.0, 100.0);
        let vis = hpr_visible(&pts, &eye, None).unwrap();
        let agree = pts
            .iter()
            .zip(&vis)
            .filter(|(p, &v)| (p.z > 0.0) == v)
            .count();
        assert!(agree as f64 >= 0.9 * pts.len() as f64, "agreement {agree}/{}", pts.len());
    }

    #[test]
    fn hpr_tetrahedron_fully_visible() {
        let tet = [
            Point3::new(1.0, 1.0, 1.0),
            Point3::new(1.0, -1.0, -1.0),
            Point3::new(-1.0, 1.0, -1.0),
            Point3::new(-1.0, -1.0, 1.0),
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let dir = Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)).normalize();
            let eye = Point3::from(dir * rng.gen_range(4.0..40.0));
            assert_eq!(hpr_visible(&tet, &eye, None).unwrap(), vec![true; 4]);
        }
        // Face-on view: the apex behind the front face is still reported visible.
        let eye = Point3::from(Vector3::new(1.0, 1.0, 1.0).normalize() * -6.0);
        assert_eq!(hpr_visible(&tet, &eye, None).unwrap(), vec![true; 4]);
    }

    #[test]
    fn hpr_point_behind_cluster_is_hidden() {
        let mut pts: Vec<Point3<f64>> = icosphere(2)
            .0
            .into_iter()
            .map(|d| Point3::from(d * 0.1 + Vector3::new(0.0, 0.0, 1.0)))
            .collect();
        pts.push(Point3::new(0.0, 0.0, 1.5));
        let vis = hpr_visible(&pts, &Point3::origin(), None).unwrap();
        assert!(!vis[pts.len() - 1]);
        // Front of the cluster is visible.
        let front = pts
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.z.total_cmp(&b.1.z))
            .unwrap()
            .0;
        assert!(vis[front]);
    }

    #[test]
    fn hpr_errors() {
        let pts = [Point3::new(0.0, 0.0, 1.0), Point3::new(1.0, 0.0, 1.0)];
        assert!(matches!(
            hpr_visible(&pts, &Point3::origin(), None),
            Err(Error::DegenerateHull(_))
        ));
        let pts = [Point3::origin(), Point3::new(1.0, 0.0, 1.0)];
        assert!(hpr_visible(&pts, &Point3::origin(), None).is_err());
    }

    #[test]
    fn r_so_counts_the_band_over_all_points() {
        let v = [0.1, 0.2, 0.3, 0.39999, 0.4, 0.9];
        assert_eq!(self_occlusion_ratio(&v), 0.5);
        let p = VisibilityProfile::from_fractions((0..6).collect(), v.to_vec());
        assert_eq!(p.r_so, 0.5);
        assert!(p.filter_decision(true));
        assert!(!p.filter_decision(false));
    }

    #[test]
    fn filter_decision_examples() {
        assert!(filter_decision(0.65, true));
        assert!(!filter_decision(0.356, true));
        assert!(!filter_decision(0.9, false));
        assert!(filter_decision(0.5, true));
        let mut prev = false;
        for i in 0..=100 {
            let d = filter_decision(i as f64 / 100.0, true);
            assert!(!(prev && !d));
            prev = d;
        }
    }

    #[test]
    fn subsampling_caps_the_evaluated_points() {
        let pts: Vec<Point3<f64>> = unit_sphere_cloud();
        let model = ObjectModel::from_points(pts).unwrap();
        let views = sample_viewpoints(0, 3.0);
        let opts = VisibilityOptions { max_points: Some(300), ..Default::default() };
        let prof = visibility_profile(&model, &views, &opts).unwrap();
        assert_eq!(prof.v.len(), 300);
        assert_eq!(prof.indices.len(), 300);
        assert!(prof.indices.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(prof, visibility_profile(&model, &views, &opts).unwrap());
    }
}
