//! Object models, rigid poses, the pinhole camera, RoI cropping, farthest
//! point sampling and the static k-NN keypoint graph.

use nalgebra::{Matrix3, Matrix4, Point2, Point3, Rotation3, Unit, Vector2, Vector3, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hull;

/// Above this vertex count the diameter is computed over convex hull vertices only.
const HULL_DIAMETER_THRESHOLD: usize = 2000;

/// A rigid object: vertices in the object frame (meters) and optional triangles.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectModel {
    vertices: Vec<Point3<f64>>,
    faces: Vec<[usize; 3]>,
    diameter: f64,
}

impl ObjectModel {
    pub fn new(vertices: Vec<Point3<f64>>, faces: Vec<[usize; 3]>) -> Result<Self> {
        if vertices.is_empty() {
            return Err(Error::invalid("object model needs at least one vertex"));
        }
        if let Some(f) = faces.iter().find(|f| f.iter().any(|&i| i >= vertices.len())) {
            return Err(Error::invalid(format!(
                "face {f:?} references a vertex outside 0..{}",
                vertices.len()
            )));
        }
        if vertices.iter().any(|v| !v.coords.iter().all(|c| c.is_finite())) {
            return Err(Error::invalid("vertex coordinates must be finite"));
        }
        let diameter = object_diameter(&vertices);
        Ok(Self {
            vertices,
            faces,
            diameter,
        })
    }

    /// Point cloud without faces.
    pub fn from_points(vertices: Vec<Point3<f64>>) -> Result<Self> {
        Self::new(vertices, Vec::new())
    }

    pub fn vertices(&self) -> &[Point3<f64>] {
        &self.vertices
    }

    pub fn faces(&self) -> &[[usize; 3]] {
        &self.faces
    }

    pub fn diameter(&self) -> f64 {
        self.diameter
    }

    pub fn len(&self) -> usize {
        self.vertices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vertices.is_empty()
    }

    pub fn centroid(&self) -> Point3<f64> {
        let sum = self
            .vertices
            .iter()
            .fold(Vector3::zeros(), |acc, v| acc + v.coords);
        Point3::from(sum / self.vertices.len() as f64)
    }
}

/// Maximum pairwise vertex distance.
///
/// A single vertex yields zero (logged as a warning). Large clouds are reduced
/// to their convex hull vertices first, which cannot change the maximum.
pub fn object_diameter(vertices: &[Point3<f64>]) -> f64 {
    if vertices.len() < 2 {
        log::warn!("object diameter of a {}-vertex model is zero", vertices.len());
        return 0.0;
    }
    if vertices.len() > HULL_DIAMETER_THRESHOLD {
        if let Ok(on_hull) = hull::hull_vertex_indices(vertices) {
            let reduced: Vec<Point3<f64>> = on_hull.iter().map(|&i| vertices[i]).collect();
            return brute_force_diameter(&reduced);
        }
    }
    brute_force_diameter(vertices)
}

fn brute_force_diameter(vertices: &[Point3<f64>]) -> f64 {
    let mut best = 0.0f64;
    for (i, a) in vertices.iter().enumerate() {
        for b in &vertices[i + 1..] {
            best = best.max((a - b).norm_squared());
        }
    }
    best.sqrt()
}

/// Rigid transform from the object frame to the camera frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

/// Tolerance on `‖RᵀR − I‖` accepted by [`Pose::new`].
pub const ROTATION_TOLERANCE: f64 = 1e-9;

impl Pose {
    /// Builds a pose, rejecting rotations that are not orthonormal with det +1.
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let ortho = (rotation.transpose() * rotation - Matrix3::identity()).norm();
        if !(ortho <= ROTATION_TOLERANCE) || rotation.determinant() <= 0.0 {
            return Err(Error::invalid(format!(
                "rotation is not in SO(3) (orthogonality residual {ortho:e})"
            )));
        }
        if !translation.iter().all(|c| c.is_finite()) {
            return Err(Error::invalid("translation must be finite"));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn from_axis_angle(axis: &Vector3<f64>, angle: f64, translation: Vector3<f64>) -> Self {
        let rot = Rotation3::from_axis_angle(&Unit::new_normalize(*axis), angle);
        Self {
            rotation: *rot.matrix(),
            translation,
        }
    }

    /// Projects an arbitrary 3×3 matrix onto SO(3) via SVD.
    pub fn orthonormalize(m: &Matrix3<f64>) -> Matrix3<f64> {
        let svd = m.svd(true, true);
        let u = svd.u.expect("svd u");
        let v_t = svd.v_t.expect("svd v_t");
        let mut d = Matrix3::identity();
        if (u * v_t).determinant() < 0.0 {
            d[(2, 2)] = -1.0;
        }
        u * d * v_t
    }

    pub fn transform(&self, p: &Point3<f64>) -> Point3<f64> {
        Point3::from(self.rotation * p.coords + self.translation)
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    pub fn to_homogeneous(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }
}

/// Pinhole intrinsics in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        let intr = Self { fx, fy, cx, cy };
        intr.validate()?;
        Ok(intr)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) || !self.cx.is_finite() || !self.cy.is_finite() {
            return Err(Error::invalid(format!(
                "focal lengths must be positive (fx={}, fy={})",
                self.fx, self.fy
            )));
        }
        Ok(())
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    /// Projects a camera-frame point; `None` when it is not in front of the camera.
    pub fn project_camera_point(&self, p: &Point3<f64>) -> Option<Point2<f64>> {
        if p.z <= 0.0 {
            return None;
        }
        Some(Point2::new(
            self.fx * p.x / p.z + self.cx,
            self.fy * p.y / p.z + self.cy,
        ))
    }

    /// Normalized image coordinates of a pixel.
    pub fn normalize(&self, uv: &Point2<f64>) -> Point2<f64> {
        Point2::new((uv.x - self.cx) / self.fx, (uv.y - self.cy) / self.fy)
    }
}

/// Projects object-frame points under `pose`.
///
/// Entries whose transformed depth is not positive come back as `None`.
pub fn project(
    points: &[Point3<f64>],
    pose: &Pose,
    intr: &CameraIntrinsics,
) -> Vec<Option<Point2<f64>>> {
    points
        .iter()
        .map(|p| intr.project_camera_point(&pose.transform(p)))
        .collect()
}

/// Axis-aligned crop of the full image resized to a square `roi_size` RoI.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoiTransform {
    pub bbox_origin: Point2<f64>,
    pub bbox_size: Vector2<f64>,
    pub roi_size: u32,
}

impl RoiTransform {
    pub fn new(bbox_origin: Point2<f64>, bbox_size: Vector2<f64>, roi_size: u32) -> Result<Self> {
        if !(bbox_size.x > 0.0 && bbox_size.y > 0.0) || roi_size == 0 {
            return Err(Error::invalid(format!(
                "bbox size {bbox_size:?} and roi size {roi_size} must be positive"
            )));
        }
        Ok(Self {
            bbox_origin,
            bbox_size,
            roi_size,
        })
    }

    /// Pixels of RoI per pixel of full image, per axis.
    pub fn scale(&self) -> Vector2<f64> {
        Vector2::new(
            self.roi_size as f64 / self.bbox_size.x,
            self.roi_size as f64 / self.bbox_size.y,
        )
    }

    pub fn to_roi(&self, p: &Point2<f64>) -> Point2<f64> {
        let s = self.scale();
        Point2::new(
            (p.x - self.bbox_origin.x) * s.x,
            (p.y - self.bbox_origin.y) * s.y,
        )
    }

    pub fn from_roi(&self, q: &Point2<f64>) -> Point2<f64> {
        Point2::new(
            q.x * self.bbox_size.x / self.roi_size as f64 + self.bbox_origin.x,
            q.y * self.bbox_size.y / self.roi_size as f64 + self.bbox_origin.y,
        )
    }
}

pub fn to_roi(points: &[Point2<f64>], t: &RoiTransform) -> Vec<Point2<f64>> {
    points.iter().map(|p| t.to_roi(p)).collect()
}

pub fn from_roi(points: &[Point2<f64>], t: &RoiTransform) -> Vec<Point2<f64>> {
    points.iter().map(|q| t.from_roi(q)).collect()
}

/// Keypoints selected from a model's vertex set.
#[derive(Debug, Clone, PartialEq)]
pub struct KeypointSet {
    /// Source vertex index of each keypoint, in selection order.
    pub indices: Vec<usize>,
    pub points: Vec<Point3<f64>>,
}

impl KeypointSet {
    pub fn from_points(points: Vec<Point3<f64>>) -> Self {
        Self {
            indices: (0..points.len()).collect(),
            points,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Greedy farthest point sampling over the model's vertices.
///
/// Starts at `seed_index`; every following pick maximizes the distance to the
/// already selected set, ties going to the lowest vertex index.
pub fn farthest_point_sample(
    model: &ObjectModel,
    n: usize,
    seed_index: usize,
) -> Result<KeypointSet> {
    let verts = model.vertices();
    if n == 0 || n > verts.len() {
        return Err(Error::invalid(format!(
            "cannot sample {n} keypoints from {} vertices",
            verts.len()
        )));
    }
    if seed_index >= verts.len() {
        return Err(Error::invalid(format!(
            "seed index {seed_index} out of range for {} vertices",
            verts.len()
        )));
    }
    let mut selected = vec![false; verts.len()];
    let mut min_dist = vec![f64::INFINITY; verts.len()];
    let mut indices = Vec::with_capacity(n);
    let mut current = seed_index;
    loop {
        selected[current] = true;
        indices.push(current);
        if indices.len() == n {
            break;
        }
        let anchor = verts[current];
        let mut best: Option<(usize, f64)> = None;
        for (i, v) in verts.iter().enumerate() {
            let d = (v - anchor).norm_squared();
            if d < min_dist[i] {
                min_dist[i] = d;
            }
            if selected[i] {
                continue;
            }
            if best.map_or(true, |(_, bd)| min_dist[i] > bd) {
                best = Some((i, min_dist[i]));
            }
        }
        current = best.expect("unselected vertex remains").0;
    }
    let points = indices.iter().map(|&i| verts[i]).collect();
    Ok(KeypointSet { indices, points })
}

/// Directed k-NN graph over keypoints: `neighbors[i]` lists the out-edges of `i`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KnnGraph {
    pub k: usize,
    neighbors: Vec<Vec<usize>>,
}

impl KnnGraph {
    /// Builds a graph from explicit adjacency lists, checking the degree and
    /// self/duplicate edge invariants.
    pub fn from_neighbors(k: usize, neighbors: Vec<Vec<usize>>) -> Result<Self> {
        let n = neighbors.len();
        let degree = k.min(n.saturating_sub(1));
        for (i, list) in neighbors.iter().enumerate() {
            if list.len() != degree {
                return Err(Error::invalid(format!(
                    "node {i} has out-degree {} (expected {degree})",
                    list.len()
                )));
            }
            let mut seen = list.clone();
            seen.sort_unstable();
            seen.dedup();
            if seen.len() != list.len() || list.iter().any(|&j| j == i || j >= n) {
                return Err(Error::invalid(format!(
                    "node {i} has a self, duplicate or out-of-range edge"
                )));
            }
        }
        Ok(Self { k, neighbors })
    }

    pub fn node_count(&self) -> usize {
        self.neighbors.len()
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    pub fn adjacency(&self) -> &[Vec<usize>] {
        &self.neighbors
    }

    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.neighbors
            .iter()
            .enumerate()
            .flat_map(|(i, list)| list.iter().map(move |&j| (i, j)))
    }

    pub fn edge_count(&self) -> usize {
        self.neighbors.iter().map(Vec::len).sum()
    }

    /// Relabels nodes: node `i` of `self` becomes node `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let mut neighbors = vec![Vec::new(); self.neighbors.len()];
        for (i, list) in self.neighbors.iter().enumerate() {
            neighbors[perm[i]] = list.iter().map(|&j| perm[j]).collect();
        }
        Self {
            k: self.k,
            neighbors,
        }
    }
}

/// Exact Euclidean k-NN graph, ties broken by lowest index.
pub fn build_knn_graph(keypoints: &[Point3<f64>], k: usize) -> Result<KnnGraph> {
    let n = keypoints.len();
    if n < 2 {
        return Err(Error::invalid(format!("k-NN graph needs at least 2 nodes, got {n}")));
    }
    if k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    let degree = k.min(n - 1);
    let neighbors = keypoints
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let mut cand: Vec<(f64, usize)> = keypoints
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(j, q)| ((p - q).norm_squared(), j))
                .collect();
            cand.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            cand.truncate(degree);
            cand.into_iter().map(|(_, j)| j).collect()
        })
        .collect();
    Ok(KnnGraph { k, neighbors })
}

/// Homogeneous 4-vector of a point, for oracle-style checks.
pub fn homogeneous(p: &Point3<f64>) -> Vector4<f64> {
    Vector4::new(p.x, p.y, p.z, 1.0)
}
