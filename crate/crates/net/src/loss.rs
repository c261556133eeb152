//! Training losses: cross-entropy on the visibility flag and code bits, L1 on
//! the two segmentation masks, and their unweighted sum.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{sigmoid, FeatureMap};

/// Clamp applied to probabilities inside every logarithm.
pub const EPS: f64 = 1e-7;

/// Binary cross-entropy of probability `p` against a 0/1 target.
pub fn bce(p: f64, target: bool) -> f64 {
    let p = p.clamp(EPS, 1.0 - EPS);
    if target {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

/// Derivative of [`bce`]`(sigmoid(z))` with respect to the logit `z`.
fn bce_logit_grad(z: f64, target: bool) -> f64 {
    let p = sigmoid(z);
    if p <= EPS || p >= 1.0 - EPS {
        0.0
    } else {
        p - if target { 1.0 } else { 0.0 }
    }
}

/// Mean cross-entropy of the visibility probabilities over all keypoints.
pub fn loss_v(probs: &[f64], targets: &[bool]) -> Result<f64> {
    if probs.len() != targets.len() || probs.is_empty() {
        return Err(Error::invalid("visibility loss needs matching, nonempty inputs"));
    }
    Ok(probs.iter().zip(targets).map(|(&p, &t)| bce(p, t)).sum::<f64>() / probs.len() as f64)
}

/// [`loss_v`] on logits, with its gradient.
pub fn loss_v_logits(logits: &[f64], targets: &[bool]) -> Result<(f64, Vec<f64>)> {
    let probs: Vec<f64> = logits.iter().map(|&z| sigmoid(z)).collect();
    let value = loss_v(&probs, targets)?;
    let n = logits.len() as f64;
    let grad = logits.iter().zip(targets).map(|(&z, &t)| bce_logit_grad(z, t) / n).collect();
    Ok((value, grad))
}

/// Cross-entropy over code bits, averaged over bits and over keypoints inside the RoI.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BitLoss {
    pub value: f64,
    /// No keypoint lies inside the RoI; the loss is defined as zero.
    pub empty: bool,
}

fn check_bits(bits: &[Vec<f64>], targets: &[Vec<bool>], visible: &[bool]) -> Result<usize> {
    if bits.len() != targets.len() || bits.len() != visible.len() {
        return Err(Error::invalid("bit loss inputs have mismatched keypoint counts"));
    }
    let width = bits.first().map_or(0, |r| r.len());
    if bits.iter().zip(targets).any(|(b, t)| b.len() != width || t.len() < width) {
        return Err(Error::invalid("bit loss rows have inconsistent widths"));
    }
    Ok(width)
}

/// `ℒ_x` or `ℒ_y` for per-keypoint bit probabilities. Only the leading
/// `bits[i].len()` target bits are used.
pub fn loss_xy(bits: &[Vec<f64>], targets: &[Vec<bool>], visible: &[bool]) -> Result<BitLoss> {
    let width = check_bits(bits, targets, visible)?;
    let inside = visible.iter().filter(|&&v| v).count();
    if inside == 0 || width == 0 {
        return Ok(BitLoss { value: 0.0, empty: true });
    }
    let mut total = 0.0;
    for ((row, t), _) in bits.iter().zip(targets).zip(visible).filter(|(_, &v)| v) {
        total += row.iter().zip(t).map(|(&p, &b)| bce(p, b)).sum::<f64>();
    }
    Ok(BitLoss {
        value: total / (width * inside) as f64,
        empty: false,
    })
}

/// [`loss_xy`] on logits, with its gradient.
pub fn loss_xy_logits(logits: &[Vec<f64>], targets: &[Vec<bool>], visible: &[bool]) -> Result<(BitLoss, Vec<Vec<f64>>)> {
    let probs: Vec<Vec<f64>> = logits.iter().map(|r| r.iter().map(|&z| sigmoid(z)).collect()).collect();
    let loss = loss_xy(&probs, targets, visible)?;
    let width = logits.first().map_or(0, |r| r.len());
    let inside = visible.iter().filter(|&&v| v).count();
    let grad = logits
        .iter()
        .zip(targets)
        .zip(visible)
        .map(|((row, t), &v)| {
            row.iter()
                .zip(t)
                .map(|(&z, &b)| if v && !loss.empty { bce_logit_grad(z, b) / (width * inside) as f64 } else { 0.0 })
                .collect()
        })
        .collect();
    Ok((loss, grad))
}

/// Mean absolute difference between `sigmoid(logits)` and binary targets,
/// with its gradient on the logits.
pub fn loss_mask(logits: &FeatureMap, targets: &[bool]) -> Result<(f64, FeatureMap)> {
    if logits.data.len() != targets.len() || targets.is_empty() {
        return Err(Error::invalid(format!(
            "mask loss needs {} targets, got {}",
            logits.data.len(),
            targets.len()
        )));
    }
    let n = targets.len() as f64;
    let mut grad = FeatureMap::zeros(logits.channels, logits.height, logits.width);
    let mut total = 0.0;
    for ((g, &z), &t) in grad.data.iter_mut().zip(&logits.data).zip(targets) {
        let p = sigmoid(z);
        let diff = p - if t { 1.0 } else { 0.0 };
        total += diff.abs();
        let sign = if diff > 0.0 {
            1.0
        } else if diff < 0.0 {
            -1.0
        } else {
            0.0
        };
        *g = sign * p * (1.0 - p) / n;
    }
    Ok((total / n, grad))
}

/// The four loss terms and their unweighted sum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct LossBreakdown {
    pub l_v: f64,
    pub l_x: f64,
    pub l_y: f64,
    pub l_mask: f64,
    pub total: f64,
}

pub fn total_loss(l_v: f64, l_x: f64, l_y: f64, l_mask: f64) -> LossBreakdown {
    LossBreakdown {
        l_v,
        l_x,
        l_y,
        l_mask,
        total: l_v + l_x + l_y + l_mask,
    }
}

impl LossBreakdown {
    /// Component-wise mean; the total is recomputed as the sum of the averaged parts.
    pub fn mean(parts: &[LossBreakdown]) -> LossBreakdown {
        let n = parts.len().max(1) as f64;
        let avg = |f: fn(&LossBreakdown) -> f64| parts.iter().map(f).sum::<f64>() / n;
        total_loss(avg(|p| p.l_v), avg(|p| p.l_x), avg(|p| p.l_y), avg(|p| p.l_mask))
    }

    pub fn is_finite(&self) -> bool {
        [self.l_v, self.l_x, self.l_y, self.l_mask, self.total].iter().all(|v| v.is_finite())
    }
}
