//! The rendered object: a mesh for keypoints and metrics plus a dense surface
//! point set for splatting.

use bitloc_core::geometry::ObjectModel;
use bitloc_core::mesh::load_mesh;
use bitloc_core::metrics::SymmetrySpec;
use bitloc_core::visibility::icosphere;
use nalgebra::{Point3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{ObjectConfig, ObjectSpec};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct SceneObject {
    pub model: ObjectModel,
    /// Dense surface samples used for rendering and masks.
    pub surface: Vec<Point3<f64>>,
    pub symmetry: SymmetrySpec,
    pub textureless: bool,
    lo: Vector3<f64>,
    extent: Vector3<f64>,
}

impl SceneObject {
    pub fn new(model: ObjectModel, surface: Vec<Point3<f64>>, symmetry: SymmetrySpec, textureless: bool) -> Result<Self> {
        if surface.is_empty() {
            return Err(Error::config("object surface has no points"));
        }
        let mut lo = Vector3::repeat(f64::INFINITY);
        let mut hi = Vector3::repeat(f64::NEG_INFINITY);
        for p in surface.iter().chain(model.vertices()) {
            lo = lo.inf(&p.coords);
            hi = hi.sup(&p.coords);
        }
        let extent = (hi - lo).map(|e| if e > 0.0 { e } else { 1.0 });
        Ok(Self {
            model,
            surface,
            symmetry,
            textureless,
            lo,
            extent,
        })
    }

    pub fn from_config(cfg: &ObjectConfig) -> Result<Self> {
        match &cfg.shape {
            ObjectSpec::Ellipsoid {
                semi_axes,
                mesh_level,
                surface_level,
            } => ellipsoid(*semi_axes, *mesh_level, *surface_level, cfg.symmetry.clone(), cfg.textureless),
            ObjectSpec::Mesh { path, surface_samples } => {
                let model = load_mesh(path)?;
                let surface = sample_surface(&model, *surface_samples, 0);
                Self::new(model, surface, cfg.symmetry.clone(), cfg.textureless)
            }
        }
    }

    /// Object coordinates normalized to `[0, 1]` over the bounding box.
    pub fn normalized_coords(&self, p: &Point3<f64>) -> [f64; 3] {
        let n = (p.coords - self.lo).component_div(&self.extent);
        [n.x, n.y, n.z]
    }

    pub fn diameter(&self) -> f64 {
        self.model.diameter()
    }
}

/// Ellipsoid with the given semi-axes. Vertices of the coarse mesh are also
/// vertices of the finer surface, since subdivision only appends midpoints.
pub fn ellipsoid(
    semi_axes: [f64; 3],
    mesh_level: u32,
    surface_level: u32,
    symmetry: SymmetrySpec,
    textureless: bool,
) -> Result<SceneObject> {
    let scale = |v: &Vector3<f64>| Point3::new(v.x * semi_axes[0], v.y * semi_axes[1], v.z * semi_axes[2]);
    let (verts, faces) = icosphere(mesh_level);
    let model = ObjectModel::new(verts.iter().map(scale).collect(), faces)?;
    let surface = icosphere(surface_level).0.iter().map(scale).collect();
    SceneObject::new(model, surface, symmetry, textureless)
}

/// Area-weighted uniform samples on the mesh triangles (the vertices when
/// the mesh has no faces).
pub fn sample_surface(model: &ObjectModel, count: usize, seed: u64) -> Vec<Point3<f64>> {
    let faces = model.faces();
    let verts = model.vertices();
    if faces.is_empty() || count == 0 {
        return verts.to_vec();
    }
    let mut cumulative = Vec::with_capacity(faces.len());
    let mut total = 0.0;
    for f in faces {
        let (a, b, c) = (verts[f[0]], verts[f[1]], verts[f[2]]);
        total += (b - a).cross(&(c - a)).norm() / 2.0;
        cumulative.push(total);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = verts.to_vec();
    for _ in 0..count {
        let r = rng.gen_range(0.0..total);
        let f = faces[cumulative.partition_point(|&c| c <= r).min(faces.len() - 1)];
        let (mut u, mut v): (f64, f64) = (rng.gen(), rng.gen());
        if u + v > 1.0 {
            (u, v) = (1.0 - u, 1.0 - v);
        }
        let (a, b, c) = (verts[f[0]], verts[f[1]], verts[f[2]]);
        out.push(a + (b - a) * u + (c - a) * v);
    }
    out
}
