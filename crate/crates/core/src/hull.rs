//! 3D quickhull that tracks which input points end up as hull vertices.

use std::collections::HashMap;

use nalgebra::{Point3, Vector3};

use crate::error::{Error, Result};

struct Face {
    v: [usize; 3],
    normal: Vector3<f64>,
    offset: f64,
    outside: Vec<usize>,
    alive: bool,
}

impl Face {
    fn new(points: &[Point3<f64>], v: [usize; 3]) -> Self {
        let (a, b, c) = (points[v[0]], points[v[1]], points[v[2]]);
        let n = (b - a).cross(&(c - a));
        let len = n.norm();
        let normal = if len > 0.0 { n / len } else { n };
        Face {
            v,
            normal,
            offset: normal.dot(&a.coords),
            outside: Vec::new(),
            alive: true,
        }
    }

    fn distance(&self, p: &Point3<f64>) -> f64 {
        self.normal.dot(&p.coords) - self.offset
    }
}

/// Indices of the input points that are vertices of the convex hull, ascending.
///
/// Points within a scale-relative tolerance of an existing face are treated as
/// not on the hull. Fewer than four non-coplanar points is an error.
pub fn hull_vertex_indices(points: &[Point3<f64>]) -> Result<Vec<usize>> {
    let faces = convex_hull(points)?;
    let mut on_hull = vec![false; points.len()];
    for f in &faces {
        for &i in f {
            on_hull[i] = true;
        }
    }
    Ok(on_hull
        .iter()
        .enumerate()
        .filter_map(|(i, &h)| h.then_some(i))
        .collect())
}

/// Triangles of the convex hull with outward (counter-clockwise) orientation.
pub fn convex_hull(points: &[Point3<f64>]) -> Result<Vec<[usize; 3]>> {
    if points.len() < 4 {
        return Err(Error::DegenerateHull(format!(
            "need at least 4 points, got {}",
            points.len()
        )));
    }
    if points.iter().any(|p| !p.coords.iter().all(|c| c.is_finite())) {
        return Err(Error::DegenerateHull("non-finite coordinates".into()));
    }
    let scale = points
        .iter()
        .flat_map(|p| p.coords.iter().map(|c| c.abs()))
        .fold(0.0f64, f64::max)
        .max(f64::MIN_POSITIVE);
    let eps = 1e-11 * scale;

    let simplex = initial_simplex(points, eps)?;
    let mut faces: Vec<Face> = Vec::new();
    let centroid = Point3::from(
        simplex
            .iter()
            .fold(Vector3::zeros(), |acc, &i| acc + points[i].coords)
            / 4.0,
    );
    for tri in [[0, 1, 2], [0, 1, 3], [0, 2, 3], [1, 2, 3]] {
        let mut v = [simplex[tri[0]], simplex[tri[1]], simplex[tri[2]]];
        let mut f = Face::new(points, v);
        if f.distance(&centroid) > 0.0 {
            v.swap(1, 2);
            f = Face::new(points, v);
        }
        faces.push(f);
    }
    let mut edges: HashMap<(usize, usize), usize> = HashMap::new();
    for (fi, f) in faces.iter().enumerate() {
        register_edges(&mut edges, f.v, fi);
    }

    for (i, p) in points.iter().enumerate() {
        if simplex.contains(&i) {
            continue;
        }
        assign_outside(&mut faces, &[0, 1, 2, 3], i, p, eps);
    }

    let mut stack: Vec<usize> = (0..faces.len()).collect();
    while let Some(fi) = stack.pop() {
        if !faces[fi].alive || faces[fi].outside.is_empty() {
            continue;
        }
        let apex = {
            let f = &faces[fi];
            *f.outside
                .iter()
                .max_by(|&&a, &&b| {
                    f.distance(&points[a])
                        .total_cmp(&f.distance(&points[b]))
                        .then(b.cmp(&a))
                })
                .expect("nonempty outside set")
        };
        let apex_pt = points[apex];

        // Faces visible from the apex, found by flood fill from `fi`.
        let mut visible = vec![fi];
        let mut is_visible: HashMap<usize, bool> = HashMap::new();
        is_visible.insert(fi, true);
        let mut cursor = 0;
        while cursor < visible.len() {
            let cur = visible[cursor];
            cursor += 1;
            let v = faces[cur].v;
            for e in 0..3 {
                let (a, b) = (v[e], v[(e + 1) % 3]);
                let nb = edges[&(b, a)];
                if is_visible.contains_key(&nb) {
                    continue;
                }
                let vis = faces[nb].distance(&apex_pt) > eps;
                is_visible.insert(nb, vis);
                if vis {
                    visible.push(nb);
                }
            }
        }

        // Horizon: directed edges of visible faces whose twin face is not visible.
        let mut horizon = Vec::new();
        for &vf in &visible {
            let v = faces[vf].v;
            for e in 0..3 {
                let (a, b) = (v[e], v[(e + 1) % 3]);
                let nb = edges[&(b, a)];
                if !is_visible[&nb] {
                    horizon.push((a, b));
                }
            }
        }

        let mut orphans = Vec::new();
        for &vf in &visible {
            faces[vf].alive = false;
            orphans.append(&mut faces[vf].outside);
            let v = faces[vf].v;
            for e in 0..3 {
                edges.remove(&(v[e], v[(e + 1) % 3]));
            }
        }

        let mut created = Vec::with_capacity(horizon.len());
        for (a, b) in horizon {
            let f = Face::new(points, [a, b, apex]);
            let id = faces.len();
            register_edges(&mut edges, f.v, id);
            faces.push(f);
            created.push(id);
        }
        for o in orphans {
            if o == apex {
                continue;
            }
            assign_outside(&mut faces, &created, o, &points[o], eps);
        }
        stack.extend(created);
    }

    Ok(faces.into_iter().filter(|f| f.alive).map(|f| f.v).collect())
}

fn register_edges(edges: &mut HashMap<(usize, usize), usize>, v: [usize; 3], id: usize) {
    for e in 0..3 {
        edges.insert((v[e], v[(e + 1) % 3]), id);
    }
}

fn assign_outside(faces: &mut [Face], candidates: &[usize], i: usize, p: &Point3<f64>, eps: f64) {
    let mut best: Option<(usize, f64)> = None;
    for &fi in candidates {
        let d = faces[fi].distance(p);
        if d > eps && best.map_or(true, |(_, bd)| d > bd) {
            best = Some((fi, d));
        }
    }
    if let Some((fi, _)) = best {
        faces[fi].outside.push(i);
    }
}

fn initial_simplex(points: &[Point3<f64>], eps: f64) -> Result<[usize; 4]> {
    // Extremes along the axes seed the first edge.
    let mut extremes = Vec::with_capacity(6);
    for axis in 0..3 {
        let (mut lo, mut hi) = (0, 0);
        for (i, p) in points.iter().enumerate() {
            if p[axis] < points[lo][axis] {
                lo = i;
            }
            if p[axis] > points[hi][axis] {
                hi = i;
            }
        }
        extremes.push(lo);
        extremes.push(hi);
    }
    let mut best = (0, 0, -1.0);
    for (ai, &a) in extremes.iter().enumerate() {
        for &b in &extremes[ai + 1..] {
            let d = (points[a] - points[b]).norm_squared();
            if d > best.2 {
                best = (a, b, d);
            }
        }
    }
    let (a, b) = (best.0, best.1);
    if best.2.sqrt() <= eps {
        return Err(Error::DegenerateHull("all points coincide".into()));
    }
    let dir = (points[b] - points[a]).normalize();
    let mut c = None;
    let mut c_dist = eps;
    for (i, p) in points.iter().enumerate() {
        let d = (p - points[a]).cross(&dir).norm();
        if d > c_dist {
            c_dist = d;
            c = Some(i);
        }
    }
    let c = c.ok_or_else(|| Error::DegenerateHull("points are collinear".into()))?;
    let normal = (points[b] - points[a])
        .cross(&(points[c] - points[a]))
        .normalize();
    let mut d_idx = None;
    let mut d_dist = eps;
    for (i, p) in points.iter().enumerate() {
        let d = normal.dot(&(p - points[a])).abs();
        if d > d_dist {
            d_dist = d;
            d_idx = Some(i);
        }
    }
    let d = d_idx.ok_or_else(|| Error::DegenerateHull("points are coplanar".into()))?;
    Ok([a, b, c, d])
}
