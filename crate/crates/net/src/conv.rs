//! 2D convolution as im2col followed by a matrix product.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::linalg::gemm;
use crate::param::{Param, Parameterized};
use crate::tensor::FeatureMap;

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    /// `C_out × (C_in · k · k)`.
    pub weight: Param,
    pub bias: Param,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        Self {
            weight: Param::uniform(format!("{name}.weight"), &[out_channels, in_channels, kernel, kernel], fan_in, rng),
            bias: Param::uniform(format!("{name}.bias"), &[out_channels], fan_in, rng),
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
        }
    }

    pub fn output_size(&self, size: usize) -> usize {
        (size + 2 * self.padding - self.kernel) / self.stride + 1
    }

    fn check_input(&self, x: &FeatureMap) -> Result<()> {
        if x.channels != self.in_channels || x.height + 2 * self.padding < self.kernel || x.width + 2 * self.padding < self.kernel {
            return Err(Error::invalid(format!(
                "{}: expected {} input channels, got {}×{}×{}",
                self.weight.name, self.in_channels, x.channels, x.height, x.width
            )));
        }
        Ok(())
    }

    /// Column matrix `(C_in · k · k) × (H_out · W_out)`.
    fn im2col(&self, x: &FeatureMap) -> Vec<f64> {
        let (ho, wo) = (self.output_size(x.height), self.output_size(x.width));
        let k = self.kernel;
        let mut col = vec![0.0; x.channels * k * k * ho * wo];
        for c in 0..x.channels {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let dst = &mut col[row * ho * wo..(row + 1) * ho * wo];
                    for oy in 0..ho {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        if iy < 0 || iy >= x.height as isize {
                            continue;
                        }
                        let src = &x.data[(c * x.height + iy as usize) * x.width..][..x.width];
                        for ox in 0..wo {
                            let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                            if ix >= 0 && ix < x.width as isize {
                                dst[oy * wo + ox] = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        col
    }

    fn col2im(&self, col: &[f64], channels: usize, height: usize, width: usize) -> FeatureMap {
        let (ho, wo) = (self.output_size(height), self.output_size(width));
        let k = self.kernel;
        let mut x = FeatureMap::zeros(channels, height, width);
        for c in 0..channels {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let src = &col[row * ho * wo..(row + 1) * ho * wo];
                    for oy in 0..ho {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        if iy < 0 || iy >= height as isize {
                            continue;
                        }
                        let dst = &mut x.data[(c * height + iy as usize) * width..][..width];
                        for ox in 0..wo {
                            let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                            if ix >= 0 && ix < width as isize {
                                dst[ix as usize] += src[oy * wo + ox];
                            }
                        }
                    }
                }
            }
        }
        x
    }

    pub fn forward(&self, x: &FeatureMap) -> Result<FeatureMap> {
        self.check_input(x)?;
        let (ho, wo) = (self.output_size(x.height), self.output_size(x.width));
        let col = self.im2col(x);
        let mut out = FeatureMap::zeros(self.out_channels, ho, wo);
        let kk = self.in_channels * self.kernel * self.kernel;
        gemm(self.out_channels, kk, ho * wo, &self.weight.value, false, &col, false, &mut out.data, false);
        for (c, chunk) in out.data.chunks_mut(ho * wo).enumerate() {
            let b = self.bias.value[c];
            for v in chunk {
                *v += b;
            }
        }
        Ok(out)
    }

    /// Accumulates parameter gradients for upstream gradient `dy` at input `x`
    /// and returns the input gradient when requested.
    pub fn backward(&mut self, x: &FeatureMap, dy: &FeatureMap, need_input_grad: bool) -> Result<Option<FeatureMap>> {
        self.check_input(x)?;
        let (ho, wo) = (self.output_size(x.height), self.output_size(x.width));
        if dy.channels != self.out_channels || dy.height != ho || dy.width != wo {
            return Err(Error::invalid(format!("{}: upstream gradient shape mismatch", self.weight.name)));
        }
        let col = self.im2col(x);
        let kk = self.in_channels * self.kernel * self.kernel;
        gemm(self.out_channels, ho * wo, kk, &dy.data, false, &col, true, &mut self.weight.grad, true);
        for (c, chunk) in dy.data.chunks(ho * wo).enumerate() {
            self.bias.grad[c] += chunk.iter().sum::<f64>();
        }
        if !need_input_grad {
            return Ok(None);
        }
        let mut dcol = vec![0.0; kk * ho * wo];
        gemm(kk, self.out_channels, ho * wo, &self.weight.value, true, &dy.data, false, &mut dcol, false);
        Ok(Some(self.col2im(&dcol, x.channels, x.height, x.width)))
    }
}

impl Parameterized for Conv2d {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        f(&self.weight);
        f(&self.bias);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}
