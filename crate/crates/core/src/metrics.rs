//! Pose accuracy metrics: ADD, ADD-S, threshold recalls, AUC and n°/n cm.

use std::collections::HashMap;

use nalgebra::{Matrix3, Point3, Rotation3, Unit, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{ObjectModel, Pose};

/// Models at least this large use the voxel-grid nearest-neighbor search in ADD-S.
const GRID_NN_THRESHOLD: usize = 2000;

/// Object symmetries considered by the rotation error.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SymmetrySpec {
    #[default]
    None,
    /// Finite symmetry group; the identity is always included implicitly.
    Discrete { rotations: Vec<Matrix3<f64>> },
    /// Rotational symmetry about `axis`, sampled at `count` evenly spaced angles.
    ContinuousAxis { axis: Vector3<f64>, count: usize },
}

impl SymmetrySpec {
    pub fn continuous(axis: Vector3<f64>) -> Self {
        SymmetrySpec::ContinuousAxis { axis, count: 360 }
    }

    pub fn is_symmetric(&self) -> bool {
        !matches!(self, SymmetrySpec::None)
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            SymmetrySpec::None => Ok(()),
            SymmetrySpec::Discrete { rotations } => {
                for r in rotations {
                    Pose::new(*r, Vector3::zeros())?;
                }
                Ok(())
            }
            SymmetrySpec::ContinuousAxis { axis, count } => {
                if *count == 0 || !(axis.norm() > 0.0) {
                    return Err(Error::invalid("continuous symmetry needs a nonzero axis and count"));
                }
                Ok(())
            }
        }
    }

    /// Every symmetry rotation, identity first.
    pub fn rotations(&self) -> Vec<Matrix3<f64>> {
        let mut out = vec![Matrix3::identity()];
        match self {
            SymmetrySpec::None => {}
            SymmetrySpec::Discrete { rotations } => out.extend(rotations.iter().copied()),
            SymmetrySpec::ContinuousAxis { axis, count } => {
                let axis = Unit::new_normalize(*axis);
                out.extend((1..*count).map(|k| {
                    let angle = std::f64::consts::TAU * k as f64 / *count as f64;
                    *Rotation3::from_axis_angle(&axis, angle).matrix()
                }));
            }
        }
        out
    }
}

/// Mean distance between corresponding transformed vertices.
pub fn add_error(pred: &Pose, gt: &Pose, model: &ObjectModel) -> f64 {
    let verts = model.vertices();
    verts
        .iter()
        .map(|v| (pred.transform(v) - gt.transform(v)).norm())
        .sum::<f64>()
        / verts.len() as f64
}

/// Mean distance from each predicted vertex to the closest ground-truth vertex.
pub fn adds_error(pred: &Pose, gt: &Pose, model: &ObjectModel) -> f64 {
    let target: Vec<Point3<f64>> = model.vertices().iter().map(|v| gt.transform(v)).collect();
    let query: Vec<Point3<f64>> = model.vertices().iter().map(|v| pred.transform(v)).collect();
    let total: f64 = if target.len() >= GRID_NN_THRESHOLD {
        let grid = NearestGrid::new(&target);
        query.iter().map(|q| grid.nearest_distance(q)).sum()
    } else {
        query.iter().map(|q| brute_nearest(&target, q)).sum()
    };
    total / query.len() as f64
}

fn brute_nearest(points: &[Point3<f64>], q: &Point3<f64>) -> f64 {
    points
        .iter()
        .map(|p| (p - q).norm_squared())
        .fold(f64::INFINITY, f64::min)
        .sqrt()
}

/// Uniform voxel hash for exact nearest-neighbor distance queries.
pub struct NearestGrid<'a> {
    points: &'a [Point3<f64>],
    cell: f64,
    origin: Point3<f64>,
    buckets: HashMap<[i64; 3], Vec<usize>>,
    extent: [i64; 3],
}

impl<'a> NearestGrid<'a> {
    pub fn new(points: &'a [Point3<f64>]) -> Self {
        let mut lo = points[0];
        let mut hi = points[0];
        for p in points {
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        let span = (hi - lo).max().max(1e-12);
        // About two points per occupied cell for surface-like clouds.
        let cell = span / (points.len() as f64 / 2.0).sqrt().max(1.0);
        let mut buckets: HashMap<[i64; 3], Vec<usize>> = HashMap::new();
        for (i, p) in points.iter().enumerate() {
            buckets.entry(Self::key_of(&lo, cell, p)).or_default().push(i);
        }
        let extent = Self::key_of(&lo, cell, &hi);
        Self {
            points,
            cell,
            origin: lo,
            buckets,
            extent,
        }
    }

    fn key_of(origin: &Point3<f64>, cell: f64, p: &Point3<f64>) -> [i64; 3] {
        [
            ((p.x - origin.x) / cell).floor() as i64,
            ((p.y - origin.y) / cell).floor() as i64,
            ((p.z - origin.z) / cell).floor() as i64,
        ]
    }

    pub fn nearest_distance(&self, q: &Point3<f64>) -> f64 {
        let key = Self::key_of(&self.origin, self.cell, q);
        let max_ring = (0..3)
            .map(|a| key[a].abs().max((key[a] - self.extent[a]).abs()))
            .max()
            .unwrap_or(0)
            + 1;
        let mut best = f64::INFINITY;
        for ring in 0..=max_ring {
            // Cells in ring `ring` and beyond are at least `(ring - 1) * cell` away.
            if ring > 0 && best <= (ring - 1) as f64 * self.cell {
                break;
            }
            for dx in -ring..=ring {
                for dy in -ring..=ring {
                    for dz in -ring..=ring {
                        if dx.abs().max(dy.abs()).max(dz.abs()) != ring {
                            continue;
                        }
                        if let Some(ids) = self.buckets.get(&[key[0] + dx, key[1] + dy, key[2] + dz]) {
                            for &i in ids {
                                best = best.min((self.points[i] - q).norm());
                            }
                        }
                    }
                }
            }
        }
        best
    }
}

/// Percentage of errors strictly below `fraction × diameter`.
pub fn recall_at(errors: &[f64], diameter: f64, fraction: f64) -> Result<f64> {
    if errors.is_empty() {
        return Err(Error::UndefinedInput("recall over an empty error list".into()));
    }
    if !(diameter > 0.0) {
        return Err(Error::invalid(format!("diameter must be positive, got {diameter}")));
    }
    let limit = fraction * diameter;
    let hits = errors.iter().filter(|&&e| e < limit).count();
    Ok(100.0 * hits as f64 / errors.len() as f64)
}

/// Area under the accuracy-vs-threshold curve, as a percentage: the mean
/// accuracy over `steps` thresholds `max·k/steps`, `k = 1..=steps`.
pub fn auc(errors: &[f64], max_threshold: f64, steps: usize) -> Result<f64> {
    if errors.is_empty() {
        return Err(Error::UndefinedInput("AUC over an empty error list".into()));
    }
    if steps == 0 || !(max_threshold > 0.0) {
        return Err(Error::invalid("AUC needs positive steps and threshold"));
    }
    let mut sorted: Vec<f64> = errors.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let total: f64 = (1..=steps)
        .map(|k| {
            let t = max_threshold * k as f64 / steps as f64;
            sorted.partition_point(|&e| e < t) as f64 / n
        })
        .sum();
    Ok(100.0 * total / steps as f64)
}

/// Geodesic rotation error in degrees.
pub fn rotation_angle_deg(a: &Matrix3<f64>, b: &Matrix3<f64>) -> f64 {
    let c = (((a.transpose() * b).trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    c.acos().to_degrees()
}

/// Rotation error (degrees) minimized over the symmetry group and translation error (meters).
pub fn rot_trans_error(pred: &Pose, gt: &Pose, sym: &SymmetrySpec) -> (f64, f64) {
    let rot = sym
        .rotations()
        .iter()
        .map(|s| rotation_angle_deg(&pred.rotation, &(gt.rotation * s)))
        .fold(f64::INFINITY, f64::min);
    (rot, (pred.translation - gt.translation).norm())
}

/// Threshold settings of a metrics report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricsConfig {
    pub add_fractions: Vec<f64>,
    pub auc_max: f64,
    pub auc_steps: usize,
    /// `n` values for the `n°, n cm` recalls.
    pub deg_cm: Vec<f64>,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            add_fractions: vec![0.02, 0.05, 0.1],
            auc_max: 0.10,
            auc_steps: 1000,
            deg_cm: vec![2.0, 5.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallEntry {
    pub threshold: f64,
    pub recall: f64,
}

/// Aggregate accuracy over a set of samples; every value is a percentage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub samples: usize,
    pub failures: usize,
    /// ADD(-S) recall per diameter fraction (ADD-S only for symmetric objects).
    pub add_s_recall: Vec<RecallEntry>,
    pub auc_adds: f64,
    pub auc_add_s: f64,
    /// Recall of rotation < n° and translation < n cm.
    pub deg_cm_recall: Vec<RecallEntry>,
}

/// Per-sample errors; failed predictions carry infinite errors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleErrors {
    pub add: f64,
    pub adds: f64,
    pub add_s: f64,
    pub rot_deg: f64,
    pub trans_m: f64,
}

impl SampleErrors {
    pub fn failed() -> Self {
        Self {
            add: f64::INFINITY,
            adds: f64::INFINITY,
            add_s: f64::INFINITY,
            rot_deg: f64::INFINITY,
            trans_m: f64::INFINITY,
        }
    }
}

pub fn sample_errors(
    pred: Option<&Pose>,
    gt: &Pose,
    model: &ObjectModel,
    sym: &SymmetrySpec,
) -> SampleErrors {
    let Some(pred) = pred else {
        return SampleErrors::failed();
    };
    let add = add_error(pred, gt, model);
    let adds = adds_error(pred, gt, model);
    let (rot_deg, trans_m) = rot_trans_error(pred, gt, sym);
    SampleErrors {
        add,
        adds,
        add_s: if sym.is_symmetric() { adds } else { add },
        rot_deg,
        trans_m,
    }
}

/// Aggregates per-sample errors into a report.
pub fn summarize(errors: &[SampleErrors], diameter: f64, cfg: &MetricsConfig) -> Result<MetricsReport> {
    if errors.is_empty() {
        return Err(Error::UndefinedInput("no samples to evaluate".into()));
    }
    let add_s: Vec<f64> = errors.iter().map(|e| e.add_s).collect();
    let adds: Vec<f64> = errors.iter().map(|e| e.adds).collect();
    let add_s_recall = cfg
        .add_fractions
        .iter()
        .map(|&f| {
            Ok(RecallEntry {
                threshold: f,
                recall: recall_at(&add_s, diameter, f)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let deg_cm_recall = cfg
        .deg_cm
        .iter()
        .map(|&n| {
            let hits = errors
                .iter()
                .filter(|e| e.rot_deg < n && e.trans_m < n / 100.0)
                .count();
            RecallEntry {
                threshold: n,
                recall: 100.0 * hits as f64 / errors.len() as f64,
            }
        })
        .collect();
    Ok(MetricsReport {
        samples: errors.len(),
        failures: errors.iter().filter(|e| e.add.is_infinite()).count(),
        add_s_recall,
        auc_adds: auc(&adds, cfg.auc_max, cfg.auc_steps)?,
        auc_add_s: auc(&add_s, cfg.auc_max, cfg.auc_steps)?,
        deg_cm_recall,
    })
}

impl MetricsReport {
    pub fn recall_for(&self, fraction: f64) -> Option<f64> {
        self.add_s_recall
            .iter()
            .find(|r| (r.threshold - fraction).abs() < 1e-12)
            .map(|r| r.recall)
    }

    /// Header and row in the column order of the usual ablation table:
    /// ADD(-S) recalls, then n°n cm recalls, then the two AUCs.
    pub fn csv_columns(&self) -> (Vec<String>, Vec<String>) {
        let mut head = Vec::new();
        let mut row = Vec::new();
        for r in &self.add_s_recall {
            head.push(format!("ADD(-S) {}d", r.threshold));
            row.push(format!("{:.1}", r.recall));
        }
        for r in &self.deg_cm_recall {
            head.push(format!("{0}deg {0}cm", r.threshold));
            row.push(format!("{:.1}", r.recall));
        }
        head.push("AUC ADD-S".into());
        row.push(format!("{:.1}", self.auc_adds));
        head.push("AUC ADD(-S)".into());
        row.push(format!("{:.1}", self.auc_add_s));
        (head, row)
    }
}
