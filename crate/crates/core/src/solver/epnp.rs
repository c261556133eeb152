//! EPnP: pose from n ≥ 4 correspondences through four (or, for planar
//! objects, three) virtual control points.

use nalgebra::{DMatrix, DVector, Matrix3, Point2, Point3, SymmetricEigen, Vector3};

use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, Pose};

/// Eigenvalue ratio below which the 3D points count as planar.
const PLANAR_RATIO: f64 = 1e-8;
/// Eigenvalue ratio below which the 3D points count as collinear.
const COLLINEAR_RATIO: f64 = 1e-10;
const GAUSS_NEWTON_ITERS: usize = 25;

/// Pose of the object frame in the camera frame from object points and their pixels.
pub fn epnp_pose(
    world: &[Point3<f64>],
    pixels: &[Point2<f64>],
    intr: &CameraIntrinsics,
) -> Result<Pose> {
    let n = world.len();
    if n != pixels.len() {
        return Err(Error::invalid("3D and 2D point counts differ"));
    }
    if n < 4 {
        return Err(Error::InsufficientData { needed: 4, got: n });
    }
    let image: Vec<Point2<f64>> = pixels.iter().map(|p| intr.normalize(p)).collect();

    let centroid = Point3::from(world.iter().fold(Vector3::zeros(), |a, p| a + p.coords) / n as f64);
    let mut cov = Matrix3::zeros();
    for p in world {
        let d = p - centroid;
        cov += d * d.transpose();
    }
    cov /= n as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let lambda: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i].max(0.0)).collect();
    if lambda[0] <= 0.0 || lambda[1] / lambda[0] < COLLINEAR_RATIO {
        return Err(Error::DegenerateConfiguration(
            "3D points are coincident or collinear".into(),
        ));
    }
    let axes_used = if lambda[2] / lambda[0] < PLANAR_RATIO { 2 } else { 3 };
    let axes: Vec<(Vector3<f64>, f64)> = order[..axes_used]
        .iter()
        .zip(&lambda)
        .map(|(&i, &l)| (eig.eigenvectors.column(i).into_owned(), l.sqrt()))
        .collect();

    let nc = axes_used + 1;
    let mut control_w = vec![centroid];
    control_w.extend(axes.iter().map(|(e, s)| centroid + e * *s));

    // Barycentric coordinates; the control axes are orthogonal so each is a projection.
    let alphas: Vec<Vec<f64>> = world
        .iter()
        .map(|p| {
            let d = p - centroid;
            let coeffs: Vec<f64> = axes.iter().map(|(e, s)| e.dot(&d) / s).collect();
            let mut a = vec![1.0 - coeffs.iter().sum::<f64>()];
            a.extend(coeffs);
            a
        })
        .collect();

    let mut mtm = DMatrix::<f64>::zeros(3 * nc, 3 * nc);
    let mut row_u = DVector::<f64>::zeros(3 * nc);
    let mut row_v = DVector::<f64>::zeros(3 * nc);
    for (a, uv) in alphas.iter().zip(&image) {
        row_u.fill(0.0);
        row_v.fill(0.0);
        for j in 0..nc {
            row_u[3 * j] = a[j];
            row_u[3 * j + 2] = -uv.x * a[j];
            row_v[3 * j + 1] = a[j];
            row_v[3 * j + 2] = -uv.y * a[j];
        }
        mtm.ger(1.0, &row_u, &row_u, 1.0);
        mtm.ger(1.0, &row_v, &row_v, 1.0);
    }
    let eig = SymmetricEigen::new(mtm);
    let mut idx: Vec<usize> = (0..3 * nc).collect();
    idx.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let null_dims = if nc == 4 { 4 } else { 3 };
    let kernel: Vec<DVector<f64>> = idx[..null_dims]
        .iter()
        .map(|&i| eig.eigenvectors.column(i).into_owned())
        .collect();

    let pairs: Vec<(usize, usize)> = (0..nc)
        .flat_map(|a| (a + 1..nc).map(move |b| (a, b)))
        .collect();
    let rho: Vec<f64> = pairs
        .iter()
        .map(|&(a, b)| (control_w[a] - control_w[b]).norm_squared())
        .collect();
    // diffs[k][p]: difference of control points a and b of pair p in kernel vector k.
    let diffs: Vec<Vec<Vector3<f64>>> = kernel
        .iter()
        .map(|v| {
            pairs
                .iter()
                .map(|&(a, b)| {
                    Vector3::new(
                        v[3 * a] - v[3 * b],
                        v[3 * a + 1] - v[3 * b + 1],
                        v[3 * a + 2] - v[3 * b + 2],
                    )
                })
                .collect()
        })
        .collect();

    let gn_dims = if nc == 4 { 4 } else { 2 };
    let mut candidates: Vec<Vec<f64>> = Vec::new();
    for dims in 1..=(if nc == 4 { 3 } else { 2 }) {
        if let Some(b) = linearized_betas(&diffs, &rho, dims) {
            let mut refined = b.clone();
            refined.resize(gn_dims, 0.0);
            gauss_newton(&diffs, &rho, &mut refined);
            candidates.push(b);
            candidates.push(refined);
        }
    }
    // Single-vector starts for the remaining kernel directions; with only four
    // points the solution needs all four vectors and the linearized cases miss it.
    if nc == 4 {
        for k in 1..kernel.len() {
            let scale = single_vector_scale(&diffs[k], &rho);
            let mut start = vec![0.0; gn_dims];
            start[k] = scale;
            gauss_newton(&diffs, &rho, &mut start);
            candidates.push(start);
        }
    }

    let mut best: Option<(f64, Pose)> = None;
    for betas in &candidates {
        let Some(pose) = pose_from_betas(betas, &kernel, &alphas, world, nc) else {
            continue;
        };
        let err = mean_reprojection(&pose, world, &image);
        if err.is_finite() && best.as_ref().map_or(true, |(e, _)| err < *e) {
            best = Some((err, pose));
        }
    }
    best.map(|(_, p)| p).ok_or_else(|| {
        Error::DegenerateConfiguration("no EPnP candidate produced a valid pose".into())
    })
}

/// Closed-form betas for a kernel of dimension `dims` (1, 2 or 3), from the
/// linearized control-point distance constraints.
fn linearized_betas(diffs: &[Vec<Vector3<f64>>], rho: &[f64], dims: usize) -> Option<Vec<f64>> {
    let products: Vec<(usize, usize)> = (0..dims)
        .flat_map(|k| (k..dims).map(move |l| (k, l)))
        .collect();
    let np = rho.len();
    if products.len() > np {
        return None;
    }
    let mut l = DMatrix::<f64>::zeros(np, products.len());
    for p in 0..np {
        for (c, &(k, m)) in products.iter().enumerate() {
            let dot = diffs[k][p].dot(&diffs[m][p]);
            l[(p, c)] = if k == m { dot } else { 2.0 * dot };
        }
    }
    let b = DVector::from_column_slice(rho);
    let sol = l.svd(true, true).solve(&b, 1e-14).ok()?;
    let lookup = |k: usize, m: usize| {
        products
            .iter()
            .position(|&pr| pr == (k, m))
            .map(|c| sol[c])
            .unwrap_or(0.0)
    };
    let b11 = lookup(0, 0);
    let mut betas = vec![b11.abs().sqrt()];
    for k in 1..dims {
        let bkk = lookup(k, k).abs().sqrt();
        let sign = if lookup(0, k) * b11.signum() < 0.0 { -1.0 } else { 1.0 };
        betas.push(bkk * sign);
    }
    if b11 < 0.0 {
        for b in &mut betas {
            *b = -*b;
        }
    }
    betas.iter().all(|b| b.is_finite()).then_some(betas)
}

/// Least-squares scale of one kernel vector against the control-point distances.
fn single_vector_scale(diffs: &[Vector3<f64>], rho: &[f64]) -> f64 {
    let num: f64 = diffs.iter().zip(rho).map(|(d, r)| d.norm() * r.sqrt()).sum();
    let den: f64 = diffs.iter().map(|d| d.norm_squared()).sum();
    if den > 0.0 {
        num / den
    } else {
        0.0
    }
}

/// Refines betas so control-point distances in the camera frame match the object frame.
fn gauss_newton(diffs: &[Vec<Vector3<f64>>], rho: &[f64], betas: &mut [f64]) {
    let nb = betas.len().min(diffs.len());
    let np = rho.len();
    for _ in 0..GAUSS_NEWTON_ITERS {
        let mut jac = DMatrix::<f64>::zeros(np, nb);
        let mut res = DVector::<f64>::zeros(np);
        for p in 0..np {
            let d: Vector3<f64> = (0..nb).map(|k| diffs[k][p] * betas[k]).sum();
            res[p] = d.norm_squared() - rho[p];
            for k in 0..nb {
                jac[(p, k)] = 2.0 * d.dot(&diffs[k][p]);
            }
        }
        let jt = jac.transpose();
        let Some(step) = (&jt * &jac).lu().solve(&(-(&jt * &res))) else {
            return;
        };
        if !step.iter().all(|s| s.is_finite()) {
            return;
        }
        for k in 0..nb {
            betas[k] += step[k];
        }
        if step.norm() < 1e-14 {
            return;
        }
    }
}

fn pose_from_betas(
    betas: &[f64],
    kernel: &[DVector<f64>],
    alphas: &[Vec<f64>],
    world: &[Point3<f64>],
    nc: usize,
) -> Option<Pose> {
    let mut control_c = vec![Vector3::zeros(); nc];
    for (b, v) in betas.iter().zip(kernel) {
        for (j, cc) in control_c.iter_mut().enumerate() {
            *cc += Vector3::new(v[3 * j], v[3 * j + 1], v[3 * j + 2]) * *b;
        }
    }
    let mut camera: Vec<Vector3<f64>> = alphas
        .iter()
        .map(|a| (0..nc).map(|j| control_c[j] * a[j]).sum())
        .collect();
    if camera.iter().map(|p| p.z).sum::<f64>() < 0.0 {
        for p in &mut camera {
            *p = -*p;
        }
    }
    rigid_align(world, &camera)
}

/// Least-squares rotation and translation mapping `src` onto `dst` (no scale).
pub(crate) fn rigid_align(src: &[Point3<f64>], dst: &[Vector3<f64>]) -> Option<Pose> {
    let n = src.len() as f64;
    let cs: Vector3<f64> = src.iter().map(|p| p.coords).sum::<Vector3<f64>>() / n;
    let cd: Vector3<f64> = dst.iter().sum::<Vector3<f64>>() / n;
    let mut h = Matrix3::zeros();
    for (s, d) in src.iter().zip(dst) {
        h += (s.coords - cs) * (d - cd).transpose();
    }
    let svd = h.svd(true, true);
    let (u, v_t) = (svd.u?, svd.v_t?);
    let v = v_t.transpose();
    let mut fix = Matrix3::identity();
    if (v * u.transpose()).determinant() < 0.0 {
        fix[(2, 2)] = -1.0;
    }
    let rotation = v * fix * u.transpose();
    let translation = cd - rotation * cs;
    rotation
        .iter()
        .chain(translation.iter())
        .all(|x| x.is_finite())
        .then_some(Pose {
            rotation,
            translation,
        })
}

fn mean_reprojection(pose: &Pose, world: &[Point3<f64>], image: &[Point2<f64>]) -> f64 {
    let mut total = 0.0;
    for (p, uv) in world.iter().zip(image) {
        let c = pose.transform(p);
        if c.z <= 0.0 {
            return f64::INFINITY;
        }
        total += ((c.x / c.z - uv.x).powi(2) + (c.y / c.z - uv.y).powi(2)).sqrt();
    }
    total / world.len() as f64
}
