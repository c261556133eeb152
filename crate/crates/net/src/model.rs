//! The complete network: backbone, graph branch and the training objective.

use std::collections::hash_map::DefaultHasher;
use std::hash::Hasher;

use bitloc_core::codes::{harden, BinaryCodeSet, CellIndex, GridSpec, SoftCodeSet};
use bitloc_core::geometry::KnnGraph;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig, SegmentationMasks};
use crate::error::{Error, Result};
use crate::graphnet::{FusionSource, GraphForward, GraphNet, StagePlan};
use crate::loss::{EPS, loss_mask, loss_v_logits, loss_xy_logits, total_loss, LossBreakdown};
use crate::param::{Param, Parameterized};
use crate::tensor::{sigmoid, FeatureMap};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetConfig {
    pub grid: GridSpec,
    pub nodes: usize,
    pub backbone: BackboneConfig,
    pub plan: StagePlan,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            grid: GridSpec::default(),
            nodes: 64,
            backbone: BackboneConfig::default(),
            plan: StagePlan::default(),
        }
    }
}

/// Which parts of the objective a training step optimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    /// Visibility, the first `d0` bits and the masks; refinement stages are skipped.
    Pretrain,
    /// The whole network with every bit.
    Full,
}

/// Supervision for one RoI.
#[derive(Debug, Clone, Copy)]
pub struct Targets<'a> {
    pub codes: &'a BinaryCodeSet,
    /// Row-major `2^d × 2^d` full-object mask.
    pub mask_full: &'a [bool],
    pub mask_visible: &'a [bool],
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub soft: SoftCodeSet,
    pub codes: BinaryCodeSet,
    pub masks: SegmentationMasks,
    pub fusion_cells: Vec<Vec<CellIndex>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoseNet {
    pub config: NetConfig,
    pub backbone: Backbone,
    pub graph: GraphNet,
}

impl PoseNet {
    pub fn new(config: NetConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let backbone = Backbone::new(config.backbone.clone(), config.grid, &mut rng)?;
        let graph = GraphNet::new(
            config.nodes,
            config.backbone.base_channels(),
            &config.backbone.decoder_channels,
            config.grid,
            config.plan.clone(),
            &mut rng,
        )?;
        Ok(Self {
            config,
            backbone,
            graph,
        })
    }

    pub fn predict(&self, image: &FeatureMap, g: &KnnGraph) -> Result<Prediction> {
        let enc = self.backbone.encode_image(image)?;
        let dec = self.backbone.decode_pyramid(&enc)?;
        let fwd = self.graph.forward(
            enc.base(),
            &dec.levels,
            g,
            self.graph.stages.len(),
            FusionSource::Predicted,
        )?;
        let soft = fwd.soft_codes()?;
        Ok(Prediction {
            codes: harden(&soft, 0.5),
            soft,
            masks: dec.masks(),
            fusion_cells: fwd.fusion_cells,
        })
    }

    /// Hash of every branch taken by the forward pass and the loss clamps.
    pub fn branch_signature(
        &self,
        image: &FeatureMap,
        g: &KnnGraph,
        phase: Phase,
        source: FusionSource<'_>,
    ) -> Result<u64> {
        let enc = self.backbone.encode_image(image)?;
        let dec = self.backbone.decode_pyramid(&enc)?;
        let fwd = self.graph.forward(enc.base(), &dec.levels, g, self.stages_for(phase), source)?;
        let mut h = DefaultHasher::new();
        h.write_u64(enc.branch_signature());
        h.write_u64(dec.branch_signature());
        h.write_u64(fwd.branch_signature());
        let clamped = |z: &f64| {
            let p = sigmoid(*z);
            p <= EPS || p >= 1.0 - EPS
        };
        for z in fwd.visible_logits.iter().chain(fwd.x_logits.iter().chain(&fwd.y_logits).flatten()) {
            h.write_u8(clamped(z) as u8);
        }
        Ok(h.finish())
    }

    fn stages_for(&self, phase: Phase) -> usize {
        match phase {
            Phase::Pretrain => 0,
            Phase::Full => self.graph.stages.len(),
        }
    }

    /// The objective on one RoI, with fusion at predicted cells.
    pub fn loss(&self, image: &FeatureMap, g: &KnnGraph, targets: Targets<'_>, phase: Phase) -> Result<LossBreakdown> {
        self.loss_with(image, g, targets, phase, false)
    }

    /// The objective on one RoI, fusing at the target cells when
    /// `teacher_forcing` is set, as [`PoseNet::accumulate_gradients`] does.
    pub fn loss_with(
        &self,
        image: &FeatureMap,
        g: &KnnGraph,
        targets: Targets<'_>,
        phase: Phase,
        teacher_forcing: bool,
    ) -> Result<LossBreakdown> {
        self.check_targets(targets)?;
        let enc = self.backbone.encode_image(image)?;
        let dec = self.backbone.decode_pyramid(&enc)?;
        let source = if teacher_forcing {
            FusionSource::Teacher(&targets.codes.codes)
        } else {
            FusionSource::Predicted
        };
        let fwd = self.graph.forward(enc.base(), &dec.levels, g, self.stages_for(phase), source)?;
        Ok(objective(&fwd, &dec.mask_logits, targets)?.breakdown)
    }

    fn check_targets(&self, targets: Targets<'_>) -> Result<()> {
        if targets.codes.codes.len() != self.graph.nodes() || targets.codes.depth != self.config.grid.depth {
            return Err(Error::invalid("target codes do not match the network"));
        }
        Ok(())
    }

    /// Evaluates the objective on one RoI and adds `scale ×` its gradient to
    /// every parameter's gradient buffer.
    pub fn accumulate_gradients(
        &mut self,
        image: &FeatureMap,
        g: &KnnGraph,
        targets: Targets<'_>,
        phase: Phase,
        teacher_forcing: bool,
        scale: f64,
    ) -> Result<LossBreakdown> {
        self.check_targets(targets)?;
        let enc = self.backbone.encode_image(image)?;
        let dec = self.backbone.decode_pyramid(&enc)?;
        let source = if teacher_forcing {
            FusionSource::Teacher(&targets.codes.codes)
        } else {
            FusionSource::Predicted
        };
        let fwd = self.graph.forward(enc.base(), &dec.levels, g, self.stages_for(phase), source)?;
        let Objective {
            breakdown,
            mut d_v,
            mut d_x,
            mut d_y,
            mut d_mask,
        } = objective(&fwd, &dec.mask_logits, targets)?;
        if !breakdown.is_finite() {
            return Err(Error::State(format!("non-finite loss {breakdown:?}")));
        }

        d_v.iter_mut().for_each(|v| *v *= scale);
        d_x.iter_mut().chain(d_y.iter_mut()).flatten().for_each(|v| *v *= scale);
        d_mask.data.iter_mut().for_each(|v| *v *= scale);
        let (d_f0, d_levels) = self.graph.backward(&fwd, enc.base(), &dec.levels, &d_v, &d_x, &d_y)?;
        self.backbone.backward(&enc, &dec, &d_f0, &d_levels, &d_mask)?;
        Ok(breakdown)
    }
}

struct Objective {
    breakdown: LossBreakdown,
    d_v: Vec<f64>,
    d_x: Vec<Vec<f64>>,
    d_y: Vec<Vec<f64>>,
    d_mask: FeatureMap,
}

fn objective(fwd: &GraphForward, mask_logits: &FeatureMap, targets: Targets<'_>) -> Result<Objective> {
    let codes = &targets.codes.codes;
    let visible: Vec<bool> = codes.iter().map(|c| c.visible).collect();
    let tx: Vec<Vec<bool>> = codes.iter().map(|c| c.x.clone()).collect();
    let ty: Vec<Vec<bool>> = codes.iter().map(|c| c.y.clone()).collect();
    let (l_v, d_v) = loss_v_logits(&fwd.visible_logits, &visible)?;
    let (l_x, d_x) = loss_xy_logits(&fwd.x_logits, &tx, &visible)?;
    let (l_y, d_y) = loss_xy_logits(&fwd.y_logits, &ty, &visible)?;
    let mut mask_targets = targets.mask_full.to_vec();
    mask_targets.extend_from_slice(targets.mask_visible);
    let (l_mask, d_mask) = loss_mask(mask_logits, &mask_targets)?;
    Ok(Objective {
        breakdown: total_loss(l_v, l_x.value, l_y.value, l_mask),
        d_v,
        d_x,
        d_y,
        d_mask,
    })
}

impl Parameterized for PoseNet {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        self.backbone.visit_params(f);
        self.graph.visit_params(f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.backbone.visit_params_mut(f);
        self.graph.visit_params_mut(f);
    }
}
