//! Shared fixtures: a central-difference gradient checker and small random inputs.

#![allow(dead_code)]

use bitloc_core::codes::GridSpec;
use bitloc_core::geometry::{build_knn_graph, KnnGraph};
use bitloc_net::backbone::BackboneConfig;
use bitloc_net::graphnet::StagePlan;
use bitloc_net::model::NetConfig;
use bitloc_net::param::{Param, Parameterized};
use nalgebra::Point3;
use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-4;
pub const REL_TOL: f64 = 1e-4;
pub const MARGIN: f64 = 1e-3;

/// Outcome of one instance of a gradient check.
#[derive(Debug, Default, Clone, Copy)]
pub struct CheckStats {
    pub compared: usize,
    /// Coordinates whose ±step perturbation crosses a kink or a discrete choice.
    pub skipped: usize,
    /// Coordinates where both gradients are below the margin.
    pub tiny: usize,
    pub worst_rel: f64,
}

fn get(model: &impl Parameterized, tensor: usize, idx: usize) -> f64 {
    let mut t = 0;
    let mut out = 0.0;
    model.visit_params(&mut |p| {
        if t == tensor {
            out = p.value[idx];
        }
        t += 1;
    });
    out
}

fn set(model: &mut impl Parameterized, tensor: usize, idx: usize, v: f64) {
    let mut t = 0;
    model.visit_params_mut(&mut |p| {
        if t == tensor {
            p.value[idx] = v;
        }
        t += 1;
    });
}

fn grads(model: &impl Parameterized) -> Vec<(String, Vec<f64>)> {
    let mut out = Vec::new();
    model.visit_params(&mut |p| out.push((p.name.clone(), p.grad.clone())));
    out
}

/// Compares analytic gradients against central differences on up to
/// `per_tensor` random coordinates of every tensor. `eval` must zero the
/// gradients, accumulate fresh ones, and return the loss together with a
/// signature of every branch the forward pass took.
pub fn check_gradients<M, F>(model: &M, eval: F, per_tensor: usize, rng: &mut ChaCha8Rng) -> CheckStats
where
    M: Parameterized + Clone,
    F: Fn(&mut M) -> (f64, u64),
{
    let mut base = model.clone();
    let (_, sig0) = eval(&mut base);
    let analytic = grads(&base);
    let mut stats = CheckStats::default();
    for (t, (name, g)) in analytic.iter().enumerate() {
        let picks = sample(rng, g.len(), per_tensor.min(g.len()));
        for idx in picks.iter() {
            let x = get(model, t, idx);
            let mut plus = model.clone();
            set(&mut plus, t, idx, x + STEP);
            let (lp, sp) = eval(&mut plus);
            let mut minus = model.clone();
            set(&mut minus, t, idx, x - STEP);
            let (lm, sm) = eval(&mut minus);
            if sp != sig0 || sm != sig0 {
                stats.skipped += 1;
                continue;
            }
            let numeric = (lp - lm) / (2.0 * STEP);
            let a = g[idx];
            if a.abs() + numeric.abs() <= MARGIN {
                stats.tiny += 1;
                assert!((a - numeric).abs() <= MARGIN, "{name}[{idx}]: analytic {a} numeric {numeric}");
                continue;
            }
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs());
            assert!(rel <= REL_TOL, "{name}[{idx}]: analytic {a} numeric {numeric} rel {rel}");
            stats.compared += 1;
            stats.worst_rel = stats.worst_rel.max(rel);
        }
    }
    stats
}

/// Sums per-instance stats and checks that most coordinates were actually compared.
pub fn assert_coverage(all: &[CheckStats]) {
    let compared: usize = all.iter().map(|s| s.compared).sum();
    let skipped: usize = all.iter().map(|s| s.skipped).sum();
    assert!(all.len() >= 20, "only {} instances", all.len());
    assert!(compared > 0, "no coordinate was compared");
    assert!(skipped * 4 < compared, "{skipped} skipped against {compared} compared");
}

pub fn random_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-scale..scale)).collect()
}

pub fn input_param(name: &str, shape: &[usize], rng: &mut ChaCha8Rng, scale: f64) -> Param {
    let mut p = Param::zeros(name, shape);
    p.value = random_vec(rng, p.len(), scale);
    p
}

pub fn random_graph(rng: &mut ChaCha8Rng, n: usize, k: usize) -> KnnGraph {
    let pts: Vec<Point3<f64>> = (0..n)
        .map(|_| Point3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
        .collect();
    build_knn_graph(&pts, k).unwrap()
}

/// A small network: 32-pixel RoI, 4-bit codes with 2 coarse bits.
pub fn tiny_config(nodes: usize) -> NetConfig {
    NetConfig {
        grid: GridSpec::new(32, 4, 2).unwrap(),
        nodes,
        backbone: BackboneConfig {
            input_channels: 3,
            encoder_channels: vec![4, 6, 8],
            decoder_channels: vec![6, 4],
            decoder_kernel: 3,
        },
        plan: StagePlan {
            base_layers: 2,
            refine_layers: 2,
            head_hidden: 12,
            patch: 1,
            project_refinement: true,
        },
    }
}
