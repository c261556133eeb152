//! Channel-major feature maps and per-node feature matrices.

use crate::error::{Error, Result};

/// `C × H × W` tensor stored channel-major, then row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::invalid(format!(
                "feature map {channels}×{height}×{width} needs {} values, got {}",
                channels * height * width,
                data.len()
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn at_mut(&mut self, c: usize, y: usize, x: usize) -> &mut f64 {
        &mut self.data[(c * self.height + y) * self.width + x]
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        &self.data[c * self.plane()..(c + 1) * self.plane()]
    }

    pub fn same_shape(&self, other: &FeatureMap) -> bool {
        self.channels == other.channels && self.height == other.height && self.width == other.width
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn add_assign(&mut self, other: &FeatureMap) {
        debug_assert!(self.same_shape(other));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Stacks channels of `self` followed by `other`.
    pub fn concat_channels(&self, other: &FeatureMap) -> Result<FeatureMap> {
        if self.height != other.height || self.width != other.width {
            return Err(Error::invalid("concatenated maps differ in spatial size"));
        }
        let mut data = Vec::with_capacity(self.data.len() + other.data.len());
        data.extend_from_slice(&self.data);
        data.extend_from_slice(&other.data);
        Ok(FeatureMap {
            channels: self.channels + other.channels,
            height: self.height,
            width: self.width,
            data,
        })
    }

    /// Splits channels into the first `first` and the rest.
    pub fn split_channels(&self, first: usize) -> (FeatureMap, FeatureMap) {
        let cut = first * self.plane();
        (
            FeatureMap {
                channels: first,
                height: self.height,
                width: self.width,
                data: self.data[..cut].to_vec(),
            },
            FeatureMap {
                channels: self.channels - first,
                height: self.height,
                width: self.width,
                data: self.data[cut..].to_vec(),
            },
        )
    }

    /// Nearest-neighbor upsampling by two.
    pub fn upsample2(&self) -> FeatureMap {
        let (h, w) = (self.height * 2, self.width * 2);
        let mut out = FeatureMap::zeros(self.channels, h, w);
        for c in 0..self.channels {
            for y in 0..h {
                for x in 0..w {
                    *out.at_mut(c, y, x) = self.at(c, y / 2, x / 2);
                }
            }
        }
        out
    }

    /// Adjoint of [`FeatureMap::upsample2`]: sums each 2×2 block.
    pub fn upsample2_backward(&self) -> FeatureMap {
        let (h, w) = (self.height / 2, self.width / 2);
        let mut out = FeatureMap::zeros(self.channels, h, w);
        for c in 0..self.channels {
            for y in 0..self.height {
                for x in 0..self.width {
                    *out.at_mut(c, y / 2, x / 2) += self.at(c, y, x);
                }
            }
        }
        out
    }
}

/// `N × C` row-major matrix of per-node embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeFeatures {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl NodeFeatures {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::invalid(format!(
                "node features {rows}×{cols} need {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn at(&self, i: usize, c: usize) -> f64 {
        self.data[i * self.cols + c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn add_assign(&mut self, other: &NodeFeatures) {
        debug_assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Row `i` of the result is row `perm[i]` of `self`.
    pub fn gather_rows(&self, perm: &[usize]) -> NodeFeatures {
        let mut out = NodeFeatures::zeros(perm.len(), self.cols);
        for (i, &p) in perm.iter().enumerate() {
            out.row_mut(i).copy_from_slice(self.row(p));
        }
        out
    }

    /// Concatenates columns of `self` and `other` row by row.
    pub fn concat_cols(&self, other: &NodeFeatures) -> Result<NodeFeatures> {
        if self.rows != other.rows {
            return Err(Error::invalid("concatenated node features differ in row count"));
        }
        let cols = self.cols + other.cols;
        let mut data = Vec::with_capacity(self.rows * cols);
        for i in 0..self.rows {
            data.extend_from_slice(self.row(i));
            data.extend_from_slice(other.row(i));
        }
        Ok(NodeFeatures {
            rows: self.rows,
            cols,
            data,
        })
    }

    /// Splits columns into the first `first` and the rest.
    pub fn split_cols(&self, first: usize) -> (NodeFeatures, NodeFeatures) {
        let mut a = NodeFeatures::zeros(self.rows, first);
        let mut b = NodeFeatures::zeros(self.rows, self.cols - first);
        for i in 0..self.rows {
            a.row_mut(i).copy_from_slice(&self.row(i)[..first]);
            b.row_mut(i).copy_from_slice(&self.row(i)[first..]);
        }
        (a, b)
    }
}

/// Feeds the sign pattern of `v` (positive or not) into `h`.
pub(crate) fn hash_signs(h: &mut impl std::hash::Hasher, v: &[f64]) {
    for chunk in v.chunks(64) {
        let mut word = 0u64;
        for (i, &x) in chunk.iter().enumerate() {
            word |= ((x > 0.0) as u64) << i;
        }
        h.write_u64(word);
    }
}

pub(crate) fn relu_inplace(v: &mut [f64]) {
    for x in v {
        if *x < 0.0 {
            *x = 0.0;
        }
    }
}

/// Zeroes the gradient where the ReLU output was not positive.
pub(crate) fn relu_backward_inplace(grad: &mut [f64], output: &[f64]) {
    for (g, &o) in grad.iter_mut().zip(output) {
        if o <= 0.0 {
            *g = 0.0;
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
