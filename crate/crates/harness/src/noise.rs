//! Controlled corruption of ground-truth codes and 2D points.

use bitloc_core::codes::{index_to_code, BinaryCodeSet};
use nalgebra::{Point2, Vector2};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::config::NoiseModel;

/// Corrupts the visible keypoints of `codes`. Each one becomes an outlier with
/// probability `outlier_prob` (its cell is redrawn uniformly); otherwise each of
/// its leading `flip_levels` bits per axis flips with probability `bit_flip_prob`.
/// Invisible keypoints are left untouched.
pub fn corrupt_codes(codes: &BinaryCodeSet, noise: &NoiseModel, rng: &mut impl Rng) -> BinaryCodeSet {
    let depth = codes.depth;
    let levels = noise.flip_levels.unwrap_or(depth).min(depth) as usize;
    let mut out = codes.clone();
    for code in out.codes.iter_mut().filter(|c| c.visible) {
        if noise.outlier_prob > 0.0 && rng.gen_bool(noise.outlier_prob) {
            let side = 1u32 << depth;
            code.x = index_to_code(rng.gen_range(0..side), depth).expect("index fits the depth");
            code.y = index_to_code(rng.gen_range(0..side), depth).expect("index fits the depth");
            continue;
        }
        if noise.bit_flip_prob > 0.0 {
            for bits in [&mut code.x, &mut code.y] {
                for b in bits.iter_mut().take(levels) {
                    if rng.gen_bool(noise.bit_flip_prob) {
                        *b = !*b;
                    }
                }
            }
        }
    }
    out
}

/// Adds isotropic Gaussian noise of standard deviation `sigma` to each point.
pub fn add_pixel_noise(points: &mut [Point2<f64>], sigma: f64, rng: &mut impl Rng) {
    if sigma <= 0.0 {
        return;
    }
    let normal = Normal::new(0.0, sigma).expect("sigma is finite and positive");
    for p in points {
        *p += Vector2::new(normal.sample(rng), normal.sample(rng));
    }
}
