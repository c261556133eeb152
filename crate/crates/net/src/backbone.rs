//! Small convolutional image branch: a stride-2 encoder down to the base
//! grid, a decoder pyramid with skip connections, and the two-channel mask head.

use std::collections::hash_map::DefaultHasher;
use std::hash::Hasher;

use bitloc_core::codes::{CellIndex, GridSpec};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conv::Conv2d;
use crate::error::{Error, Result};
use crate::param::{Param, Parameterized};
use crate::tensor::{hash_signs, relu_backward_inplace, relu_inplace, sigmoid, FeatureMap};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    pub input_channels: usize,
    /// Output channels of each 2×2 stride-2 encoder layer; there must be
    /// `log2(roi_size) − base_depth` of them.
    pub encoder_channels: Vec<usize>,
    /// Output channels of the decoder level at each refinement resolution.
    pub decoder_channels: Vec<usize>,
    pub decoder_kernel: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            input_channels: 3,
            encoder_channels: vec![8, 16, 32, 64, 64],
            decoder_channels: vec![16, 16, 8],
            decoder_kernel: 3,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self, grid: &GridSpec) -> Result<()> {
        grid.validate()?;
        if !grid.roi_size.is_power_of_two() {
            return Err(Error::invalid("roi size must be a power of two"));
        }
        let log_roi = grid.roi_size.trailing_zeros();
        if grid.depth >= log_roi {
            return Err(Error::invalid("finest grid level must be coarser than the RoI resolution"));
        }
        let layers = (log_roi - grid.base_depth) as usize;
        if self.encoder_channels.len() != layers {
            return Err(Error::invalid(format!(
                "encoder needs {layers} stride-2 layers to reach 2^{}, got {}",
                grid.base_depth,
                self.encoder_channels.len()
            )));
        }
        if self.decoder_channels.len() != grid.refinement_stages() as usize {
            return Err(Error::invalid(format!(
                "decoder needs {} levels, got {}",
                grid.refinement_stages(),
                self.decoder_channels.len()
            )));
        }
        if self.decoder_kernel % 2 == 0 {
            return Err(Error::invalid("decoder kernel must be odd"));
        }
        if self.input_channels == 0 || self.encoder_channels.iter().chain(&self.decoder_channels).any(|&c| c == 0) {
            return Err(Error::invalid("channel counts must be positive"));
        }
        Ok(())
    }

    pub fn base_channels(&self) -> usize {
        *self.encoder_channels.last().unwrap_or(&0)
    }
}

/// Sigmoid-squashed full and visible masks on the finest grid.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationMasks {
    pub side: usize,
    pub full: Vec<f64>,
    pub visible: Vec<f64>,
}

impl SegmentationMasks {
    pub fn from_logits(logits: &FeatureMap) -> Self {
        let plane = logits.plane();
        Self {
            side: logits.width,
            full: logits.data[..plane].iter().map(|&v| sigmoid(v)).collect(),
            visible: logits.data[plane..2 * plane].iter().map(|&v| sigmoid(v)).collect(),
        }
    }
}

/// Encoder activations kept for the decoder skips and the backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoded {
    pub input: FeatureMap,
    /// Post-ReLU output of every encoder layer, finest first; the last is `F^(0)`.
    pub activations: Vec<FeatureMap>,
}

impl Encoded {
    pub fn base(&self) -> &FeatureMap {
        self.activations.last().expect("encoder has layers")
    }

    /// Hash of every ReLU decision; equal signatures mean the same linear piece.
    pub fn branch_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for a in &self.activations {
            hash_signs(&mut h, &a.data);
        }
        h.finish()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decoded {
    /// `F^(1) … F^(d−d0)`, coarsest first.
    pub levels: Vec<FeatureMap>,
    /// Two-channel logits (full, visible) at the finest level.
    pub mask_logits: FeatureMap,
    conv_inputs: Vec<FeatureMap>,
}

impl Decoded {
    pub fn masks(&self) -> SegmentationMasks {
        SegmentationMasks::from_logits(&self.mask_logits)
    }

    /// Hash of every ReLU decision in the decoder.
    pub fn branch_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for l in &self.levels {
            hash_signs(&mut h, &l.data);
        }
        h.finish()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub grid: GridSpec,
    pub encoder: Vec<Conv2d>,
    pub decoder: Vec<Conv2d>,
    pub mask_head: Conv2d,
}

impl Backbone {
    pub fn new(config: BackboneConfig, grid: GridSpec, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate(&grid)?;
        let mut encoder = Vec::new();
        let mut cin = config.input_channels;
        for (i, &c) in config.encoder_channels.iter().enumerate() {
            encoder.push(Conv2d::new(&format!("encoder.{i}"), cin, c, 2, 2, 0, rng));
            cin = c;
        }
        let mut decoder = Vec::new();
        let mut prev = config.base_channels();
        let k = config.decoder_kernel;
        for (j, &c) in config.decoder_channels.iter().enumerate() {
            let skip = config.encoder_channels[Self::skip_layer(&config, j)];
            decoder.push(Conv2d::new(&format!("decoder.{j}"), prev + skip, c, k, 1, k / 2, rng));
            prev = c;
        }
        let mask_head = Conv2d::new("mask_head", prev, 2, 1, 1, 0, rng);
        Ok(Self {
            config,
            grid,
            encoder,
            decoder,
            mask_head,
        })
    }

    /// Encoder layer whose output matches decoder level `j`'s resolution.
    fn skip_layer(config: &BackboneConfig, j: usize) -> usize {
        config.encoder_channels.len() - 2 - j
    }

    pub fn encode_image(&self, image: &FeatureMap) -> Result<Encoded> {
        let roi = self.grid.roi_size as usize;
        if image.channels != self.config.input_channels || image.height != roi || image.width != roi {
            return Err(Error::invalid(format!(
                "expected a {}×{roi}×{roi} image, got {}×{}×{}",
                self.config.input_channels, image.channels, image.height, image.width
            )));
        }
        let mut activations = Vec::with_capacity(self.encoder.len());
        let mut x = image;
        for conv in &self.encoder {
            let mut y = conv.forward(x)?;
            relu_inplace(&mut y.data);
            activations.push(y);
            x = activations.last().unwrap();
        }
        Ok(Encoded {
            input: image.clone(),
            activations,
        })
    }

    pub fn decode_pyramid(&self, enc: &Encoded) -> Result<Decoded> {
        if enc.activations.len() != self.encoder.len() {
            return Err(Error::invalid("encoder state does not belong to this backbone"));
        }
        let mut levels: Vec<FeatureMap> = Vec::with_capacity(self.decoder.len());
        let mut conv_inputs = Vec::with_capacity(self.decoder.len());
        for (j, conv) in self.decoder.iter().enumerate() {
            let prev = if j == 0 { enc.base() } else { &levels[j - 1] };
            let skip = &enc.activations[Self::skip_layer(&self.config, j)];
            let input = prev.upsample2().concat_channels(skip)?;
            let mut y = conv.forward(&input)?;
            relu_inplace(&mut y.data);
            conv_inputs.push(input);
            levels.push(y);
        }
        let mask_logits = self.mask_head.forward(levels.last().unwrap_or(enc.base()))?;
        Ok(Decoded {
            levels,
            mask_logits,
            conv_inputs,
        })
    }

    /// Accumulates parameter gradients given upstream gradients on `F^(0)`,
    /// every pyramid level and the mask logits.
    pub fn backward(
        &mut self,
        enc: &Encoded,
        dec: &Decoded,
        d_base: &FeatureMap,
        d_levels: &[FeatureMap],
        d_mask_logits: &FeatureMap,
    ) -> Result<()> {
        if d_levels.len() != dec.levels.len() || !d_base.same_shape(enc.base()) {
            return Err(Error::invalid("backbone gradient shapes do not match the forward pass"));
        }
        let mut d_act: Vec<FeatureMap> = enc
            .activations
            .iter()
            .map(|a| FeatureMap::zeros(a.channels, a.height, a.width))
            .collect();
        d_act.last_mut().unwrap().add_assign(d_base);

        let mut d_lv: Vec<FeatureMap> = d_levels.to_vec();
        let last_level = dec.levels.last().unwrap_or(enc.base());
        let d_last = self
            .mask_head
            .backward(last_level, d_mask_logits, true)?
            .expect("input gradient requested");
        match d_lv.last_mut() {
            Some(d) => d.add_assign(&d_last),
            None => d_act.last_mut().unwrap().add_assign(&d_last),
        }

        for j in (0..self.decoder.len()).rev() {
            let mut d_pre = d_lv[j].clone();
            relu_backward_inplace(&mut d_pre.data, &dec.levels[j].data);
            let d_in = self.decoder[j]
                .backward(&dec.conv_inputs[j], &d_pre, true)?
                .expect("input gradient requested");
            let prev_channels = if j == 0 { enc.base().channels } else { dec.levels[j - 1].channels };
            let (d_up, d_skip) = d_in.split_channels(prev_channels);
            d_act[Self::skip_layer(&self.config, j)].add_assign(&d_skip);
            let d_prev = d_up.upsample2_backward();
            if j == 0 {
                d_act.last_mut().unwrap().add_assign(&d_prev);
            } else {
                d_lv[j - 1].add_assign(&d_prev);
            }
        }

        for l in (0..self.encoder.len()).rev() {
            let mut d_pre = d_act[l].clone();
            relu_backward_inplace(&mut d_pre.data, &enc.activations[l].data);
            let input = if l == 0 { &enc.input } else { &enc.activations[l - 1] };
            if let Some(d_in) = self.encoder[l].backward(input, &d_pre, l > 0)? {
                d_act[l - 1].add_assign(&d_in);
            }
        }
        Ok(())
    }
}

impl Parameterized for Backbone {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        for c in self.encoder.iter().chain(&self.decoder) {
            c.visit_params(f);
        }
        self.mask_head.visit_params(f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        for c in self.encoder.iter_mut().chain(self.decoder.iter_mut()) {
            c.visit_params_mut(f);
        }
        self.mask_head.visit_params_mut(f);
    }
}

fn check_patch(level: &FeatureMap, cell: &CellIndex, patch: usize) -> Result<()> {
    if patch % 2 == 0 {
        return Err(Error::invalid(format!("patch size {patch} must be odd")));
    }
    let side = 1usize << cell.level;
    if level.width != side || level.height != side {
        return Err(Error::invalid(format!(
            "cell level {} does not match a {}×{} map",
            cell.level, level.height, level.width
        )));
    }
    Ok(())
}

/// `patch × patch × C` window centered on `cell`, zero-padded, flattened in
/// (channel, row, column) order.
pub fn crop_patch(level: &FeatureMap, cell: &CellIndex, patch: usize) -> Result<Vec<f64>> {
    check_patch(level, cell, patch)?;
    let r = (patch / 2) as isize;
    let mut out = Vec::with_capacity(level.channels * patch * patch);
    for c in 0..level.channels {
        for dy in -r..=r {
            for dx in -r..=r {
                let (y, x) = (cell.iy as isize + dy, cell.ix as isize + dx);
                let inside = y >= 0 && x >= 0 && (y as usize) < level.height && (x as usize) < level.width;
                out.push(if inside { level.at(c, y as usize, x as usize) } else { 0.0 });
            }
        }
    }
    Ok(out)
}

/// Adjoint of [`crop_patch`]: scatters `grad` back into `d_level`.
pub fn crop_patch_backward(d_level: &mut FeatureMap, cell: &CellIndex, patch: usize, grad: &[f64]) -> Result<()> {
    check_patch(d_level, cell, patch)?;
    if grad.len() != d_level.channels * patch * patch {
        return Err(Error::invalid("patch gradient has the wrong length"));
    }
    let r = (patch / 2) as isize;
    let mut k = 0;
    for c in 0..d_level.channels {
        for dy in -r..=r {
            for dx in -r..=r {
                let (y, x) = (cell.iy as isize + dy, cell.ix as isize + dx);
                if y >= 0 && x >= 0 && (y as usize) < d_level.height && (x as usize) < d_level.width {
                    *d_level.at_mut(c, y as usize, x as usize) += grad[k];
                }
                k += 1;
            }
        }
    }
    Ok(())
}
