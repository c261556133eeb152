//! Progressive bit prediction on the keypoint graph: a base stage emitting the
//! visibility flag and the first `d0` bits of each axis, then one refinement
//! stage per extra bit that fuses image features of the four sub-cells of the
//! keypoint's current cell.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use bitloc_core::codes::{child_cells, prefix_cell, CellIndex, GridSpec, KeypointCode, SoftCodeSet};
use bitloc_core::geometry::KnnGraph;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{crop_patch, crop_patch_backward};
use crate::error::{Error, Result};
use crate::layers::{edgeconv_accumulate, edgeconv_forward, EdgeConvCache, EdgeConvLayer, InitEmbedding, Linear, Mlp, MlpCache};
use crate::param::{Param, Parameterized};
use crate::tensor::{sigmoid, FeatureMap, NodeFeatures};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StagePlan {
    /// EdgeConv layers before the base heads.
    pub base_layers: usize,
    /// EdgeConv layers in each refinement stage.
    pub refine_layers: usize,
    pub head_hidden: usize,
    /// Odd side of the feature window cropped around each sub-cell.
    pub patch: usize,
    /// Project `[features, patches]` back to the embedding width before the
    /// refinement EdgeConv layers.
    pub project_refinement: bool,
}

impl Default for StagePlan {
    fn default() -> Self {
        Self {
            base_layers: 2,
            refine_layers: 3,
            head_hidden: 64,
            patch: 1,
            project_refinement: true,
        }
    }
}

impl StagePlan {
    pub fn validate(&self) -> Result<()> {
        if self.base_layers == 0 || self.refine_layers == 0 || self.head_hidden == 0 {
            return Err(Error::invalid("stage layer counts and head width must be at least 1"));
        }
        if self.patch % 2 == 0 {
            return Err(Error::invalid(format!("patch size {} must be odd", self.patch)));
        }
        Ok(())
    }
}

/// Embedding width `2^(2·d0)`.
pub fn embedding_width(grid: &GridSpec) -> usize {
    1 << (2 * grid.base_depth)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefinementStage {
    pub projection: Option<Linear>,
    pub layers: Vec<EdgeConvLayer>,
    pub head: Mlp,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GraphNet {
    pub plan: StagePlan,
    pub grid: GridSpec,
    pub embedding: InitEmbedding,
    pub base_layers: Vec<EdgeConvLayer>,
    pub base_head: Mlp,
    pub stages: Vec<RefinementStage>,
}

#[derive(Debug, Clone, PartialEq)]
struct LayerStack {
    caches: Vec<EdgeConvCache>,
}

/// Output of the base stage. Logits are stored; probabilities come from sigmoid.
#[derive(Debug, Clone, PartialEq)]
pub struct Stage0Output {
    pub visible_logits: Vec<f64>,
    /// `N × d0` logits of the leading x bits.
    pub x_logits: Vec<Vec<f64>>,
    pub y_logits: Vec<Vec<f64>>,
    pub features: NodeFeatures,
    stack: LayerStack,
    head: MlpCache,
}

impl Stage0Output {
    pub fn visible_probs(&self) -> Vec<f64> {
        self.visible_logits.iter().map(|&z| sigmoid(z)).collect()
    }

    pub fn bit_probs(&self) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        (probs(&self.x_logits), probs(&self.y_logits))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefinementOutput {
    pub x_logits: Vec<f64>,
    pub y_logits: Vec<f64>,
    pub features: NodeFeatures,
    input: NodeFeatures,
    projected: Option<NodeFeatures>,
    stack: LayerStack,
    head: MlpCache,
}

impl RefinementOutput {
    pub fn bit_probs(&self) -> (Vec<f64>, Vec<f64>) {
        (
            self.x_logits.iter().map(|&z| sigmoid(z)).collect(),
            self.y_logits.iter().map(|&z| sigmoid(z)).collect(),
        )
    }
}

fn probs(rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
    rows.iter().map(|r| r.iter().map(|&z| sigmoid(z)).collect()).collect()
}

/// Everything produced by a forward pass through the graph branch.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphForward {
    pub visible_logits: Vec<f64>,
    /// Per keypoint, logits of the bits predicted so far (`d0 + stages run`).
    pub x_logits: Vec<Vec<f64>>,
    pub y_logits: Vec<Vec<f64>>,
    /// Cell each keypoint was refined from, per refinement stage.
    pub fusion_cells: Vec<Vec<CellIndex>>,
    embedding: NodeFeatures,
    stage0: Stage0Output,
    refinements: Vec<RefinementOutput>,
}

impl GraphForward {
    pub fn depth(&self) -> usize {
        self.x_logits.first().map_or(0, |r| r.len())
    }

    pub fn soft_codes(&self) -> Result<SoftCodeSet> {
        Ok(SoftCodeSet::new(
            self.depth() as u32,
            self.visible_logits.iter().map(|&z| sigmoid(z)).collect(),
            probs(&self.x_logits),
            probs(&self.y_logits),
        )?)
    }

    /// Hash of every ReLU, max and prefix-hardening decision.
    pub fn branch_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        let stacks = std::iter::once((&self.stage0.stack, &self.stage0.head))
            .chain(self.refinements.iter().map(|r| (&r.stack, &r.head)));
        for (stack, head) in stacks {
            for c in &stack.caches {
                h.write_u64(c.branch_signature());
            }
            h.write_u64(head.branch_signature());
        }
        for cells in &self.fusion_cells {
            cells.hash(&mut h);
        }
        h.finish()
    }

    pub fn embedding(&self) -> &NodeFeatures {
        &self.embedding
    }

    pub fn final_features(&self) -> &NodeFeatures {
        self.refinements.last().map_or(&self.stage0.features, |r| &r.features)
    }
}

/// Which cell each keypoint's next refinement starts from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FusionSource<'a> {
    /// Hardened predicted prefix bits (inference behavior).
    Predicted,
    /// Ground-truth prefix for keypoints inside the RoI, predicted otherwise.
    Teacher(&'a [KeypointCode]),
}

fn hard_bit(logit: f64) -> bool {
    sigmoid(logit) >= 0.5
}

fn prefix_from_bits(x: &[f64], y: &[f64], level: u32) -> CellIndex {
    let bits_to = |row: &[f64]| row[..level as usize].iter().fold(0u32, |acc, &z| (acc << 1) | hard_bit(z) as u32);
    CellIndex {
        level,
        ix: bits_to(x),
        iy: bits_to(y),
    }
}

fn run_stack(layers: &[EdgeConvLayer], f: &NodeFeatures, g: &KnnGraph) -> Result<(NodeFeatures, LayerStack)> {
    let mut caches = Vec::with_capacity(layers.len());
    let mut h = f.clone();
    for layer in layers {
        let (out, cache) = edgeconv_forward(&h, g, layer)?;
        caches.push(cache);
        h = out;
    }
    Ok((h, LayerStack { caches }))
}

fn backward_stack(layers: &mut [EdgeConvLayer], stack: &LayerStack, d_out: NodeFeatures) -> Result<NodeFeatures> {
    let mut d = d_out;
    for (layer, cache) in layers.iter_mut().zip(&stack.caches).rev() {
        d = edgeconv_accumulate(layer, cache, &d)?;
    }
    Ok(d)
}

impl GraphNet {
    pub fn new(
        nodes: usize,
        base_channels: usize,
        patch_channels: &[usize],
        grid: GridSpec,
        plan: StagePlan,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        grid.validate()?;
        plan.validate()?;
        if nodes == 0 {
            return Err(Error::invalid("graph needs at least one node"));
        }
        if patch_channels.len() != grid.refinement_stages() as usize {
            return Err(Error::invalid("one patch channel count per refinement stage is required"));
        }
        let width = embedding_width(&grid);
        let d0 = grid.base_depth as usize;
        let embedding = InitEmbedding::new(nodes, base_channels, width, rng);
        let base_layers = (0..plan.base_layers)
            .map(|l| EdgeConvLayer::new(&format!("stage0.edgeconv.{l}"), width, width, rng))
            .collect();
        let base_head = Mlp::new("stage0.head", width, plan.head_hidden, 1 + 2 * d0, rng);
        let mut stages = Vec::new();
        for (j, &c) in patch_channels.iter().enumerate() {
            let name = format!("stage{}", j + 1);
            let fused = width + 4 * c * plan.patch * plan.patch;
            let (projection, first_in) = if plan.project_refinement {
                (Some(Linear::new(&format!("{name}.projection"), fused, width, rng)), width)
            } else {
                (None, fused)
            };
            let layers = (0..plan.refine_layers)
                .map(|l| EdgeConvLayer::new(&format!("{name}.edgeconv.{l}"), if l == 0 { first_in } else { width }, width, rng))
                .collect();
            let head = Mlp::new(&format!("{name}.head"), width, plan.head_hidden, 2, rng);
            stages.push(RefinementStage {
                projection,
                layers,
                head,
            });
        }
        Ok(Self {
            plan,
            grid,
            embedding,
            base_layers,
            base_head,
            stages,
        })
    }

    pub fn nodes(&self) -> usize {
        self.embedding.nodes()
    }

    pub fn init_embedding(&self, f0: &FeatureMap) -> Result<NodeFeatures> {
        self.embedding.forward(f0)
    }

    pub fn predict_stage0(&self, f: &NodeFeatures, g: &KnnGraph) -> Result<Stage0Output> {
        let (h, stack) = run_stack(&self.base_layers, f, g)?;
        let (logits, head) = self.base_head.forward(&h)?;
        let d0 = self.grid.base_depth as usize;
        let mut visible_logits = Vec::with_capacity(f.rows);
        let mut x_logits = Vec::with_capacity(f.rows);
        let mut y_logits = Vec::with_capacity(f.rows);
        for i in 0..f.rows {
            let r = logits.row(i);
            visible_logits.push(r[0]);
            x_logits.push(r[1..1 + d0].to_vec());
            y_logits.push(r[1 + d0..1 + 2 * d0].to_vec());
        }
        Ok(Stage0Output {
            visible_logits,
            x_logits,
            y_logits,
            features: h,
            stack,
            head,
        })
    }

    /// Refinement stage `stage` (1-based) on features `f` and fused patch vectors.
    pub fn predict_refinement(
        &self,
        f: &NodeFeatures,
        g: &KnnGraph,
        stage: usize,
        patches: &NodeFeatures,
    ) -> Result<RefinementOutput> {
        if stage == 0 || stage > self.stages.len() {
            return Err(Error::invalid(format!(
                "refinement stage {stage} outside 1..={}",
                self.stages.len()
            )));
        }
        let st = &self.stages[stage - 1];
        let input = f.concat_cols(patches)?;
        let projected = match &st.projection {
            Some(p) => Some(p.forward(&input)?),
            None => None,
        };
        let (h, stack) = run_stack(&st.layers, projected.as_ref().unwrap_or(&input), g)?;
        let (logits, head) = st.head.forward(&h)?;
        Ok(RefinementOutput {
            x_logits: (0..h.rows).map(|i| logits.at(i, 0)).collect(),
            y_logits: (0..h.rows).map(|i| logits.at(i, 1)).collect(),
            features: h,
            input,
            projected,
            stack,
            head,
        })
    }

    /// Concatenated sub-cell patches for every node.
    pub fn fuse_patches(&self, level: &FeatureMap, cells: &[CellIndex]) -> Result<NodeFeatures> {
        let p = self.plan.patch;
        let width = 4 * level.channels * p * p;
        let mut out = NodeFeatures::zeros(cells.len(), width);
        for (i, cell) in cells.iter().enumerate() {
            let mut v = Vec::with_capacity(width);
            for child in child_cells(cell)? {
                v.extend(crop_patch(level, &child, p)?);
            }
            out.row_mut(i).copy_from_slice(&v);
        }
        Ok(out)
    }

    fn fuse_patches_backward(&self, d_level: &mut FeatureMap, cells: &[CellIndex], d_patches: &NodeFeatures) -> Result<()> {
        let p = self.plan.patch;
        let chunk = d_level.channels * p * p;
        for (i, cell) in cells.iter().enumerate() {
            for (c, child) in child_cells(cell)?.iter().enumerate() {
                crop_patch_backward(d_level, child, p, &d_patches.row(i)[c * chunk..(c + 1) * chunk])?;
            }
        }
        Ok(())
    }

    /// Full graph branch from `F^(0)` through `stages` refinement stages.
    pub fn forward(
        &self,
        f0: &FeatureMap,
        levels: &[FeatureMap],
        g: &KnnGraph,
        stages: usize,
        source: FusionSource<'_>,
    ) -> Result<GraphForward> {
        if stages > self.stages.len() || levels.len() < stages {
            return Err(Error::invalid(format!(
                "cannot run {stages} refinement stages with {} pyramid levels",
                levels.len()
            )));
        }
        if g.node_count() != self.nodes() {
            return Err(Error::invalid(format!(
                "graph has {} nodes, network expects {}",
                g.node_count(),
                self.nodes()
            )));
        }
        if let FusionSource::Teacher(codes) = source {
            if codes.len() != self.nodes() || codes.iter().any(|c| c.x.len() < self.grid.depth as usize) {
                return Err(Error::invalid("teacher codes do not match the network"));
            }
        }
        let embedding = self.init_embedding(f0)?;
        let stage0 = self.predict_stage0(&embedding, g)?;
        let mut x_logits = stage0.x_logits.clone();
        let mut y_logits = stage0.y_logits.clone();
        let mut refinements: Vec<RefinementOutput> = Vec::with_capacity(stages);
        let mut fusion_cells = Vec::with_capacity(stages);
        let d0 = self.grid.base_depth;
        for j in 1..=stages {
            let level = d0 + j as u32 - 1;
            let cells = (0..self.nodes())
                .map(|i| match source {
                    FusionSource::Teacher(codes) if codes[i].visible => prefix_cell(&codes[i], level),
                    _ => Ok(prefix_from_bits(&x_logits[i], &y_logits[i], level)),
                })
                .collect::<bitloc_core::Result<Vec<CellIndex>>>()?;
            let patches = self.fuse_patches(&levels[j - 1], &cells)?;
            let f = refinements.last().map_or(&stage0.features, |r| &r.features);
            let out = self.predict_refinement(f, g, j, &patches)?;
            for i in 0..self.nodes() {
                x_logits[i].push(out.x_logits[i]);
                y_logits[i].push(out.y_logits[i]);
            }
            fusion_cells.push(cells);
            refinements.push(out);
        }
        Ok(GraphForward {
            visible_logits: stage0.visible_logits.clone(),
            x_logits,
            y_logits,
            fusion_cells,
            embedding,
            stage0,
            refinements,
        })
    }

    /// Accumulates parameter gradients from logit gradients and returns the
    /// gradients on `F^(0)` and on each pyramid level used.
    pub fn backward(
        &mut self,
        fwd: &GraphForward,
        f0: &FeatureMap,
        levels: &[FeatureMap],
        d_visible: &[f64],
        d_x: &[Vec<f64>],
        d_y: &[Vec<f64>],
    ) -> Result<(FeatureMap, Vec<FeatureMap>)> {
        let n = self.nodes();
        let depth = fwd.depth();
        if d_visible.len() != n || d_x.len() != n || d_y.len() != n || d_x.iter().chain(d_y).any(|r| r.len() != depth) {
            return Err(Error::invalid("graph gradient shapes do not match the forward pass"));
        }
        let d0 = self.grid.base_depth as usize;
        let mut d_levels: Vec<FeatureMap> = levels
            .iter()
            .map(|l| FeatureMap::zeros(l.channels, l.height, l.width))
            .collect();
        let mut d_feat: Option<NodeFeatures> = None;
        for j in (1..=fwd.refinements.len()).rev() {
            let out = &fwd.refinements[j - 1];
            let mut d_logits = NodeFeatures::zeros(n, 2);
            for i in 0..n {
                d_logits.row_mut(i).copy_from_slice(&[d_x[i][d0 + j - 1], d_y[i][d0 + j - 1]]);
            }
            let stage = &mut self.stages[j - 1];
            let mut d_h = stage.head.backward(&out.head, &d_logits);
            if let Some(d) = d_feat.take() {
                d_h.add_assign(&d);
            }
            let d_stack_in = backward_stack(&mut stage.layers, &out.stack, d_h)?;
            let d_input = match (&mut stage.projection, &out.projected) {
                (Some(p), Some(_)) => p.backward(&out.input, &d_stack_in),
                _ => d_stack_in,
            };
            let width = fwd.stage0.features.cols;
            let (d_prev, d_patches) = d_input.split_cols(width);
            self.fuse_patches_backward(&mut d_levels[j - 1], &fwd.fusion_cells[j - 1], &d_patches)?;
            d_feat = Some(d_prev);
        }
        let mut d_logits = NodeFeatures::zeros(n, 1 + 2 * d0);
        for i in 0..n {
            let r = d_logits.row_mut(i);
            r[0] = d_visible[i];
            r[1..1 + d0].copy_from_slice(&d_x[i][..d0]);
            r[1 + d0..].copy_from_slice(&d_y[i][..d0]);
        }
        let mut d_h = self.base_head.backward(&fwd.stage0.head, &d_logits);
        if let Some(d) = d_feat {
            d_h.add_assign(&d);
        }
        let d_embedding = backward_stack(&mut self.base_layers, &fwd.stage0.stack, d_h)?;
        let d_f0 = self.embedding.backward(f0, &d_embedding);
        Ok((d_f0, d_levels))
    }
}

impl Parameterized for GraphNet {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        self.embedding.visit_params(f);
        for l in &self.base_layers {
            l.visit_params(f);
        }
        self.base_head.visit_params(f);
        for s in &self.stages {
            if let Some(p) = &s.projection {
                p.visit_params(f);
            }
            for l in &s.layers {
                l.visit_params(f);
            }
            s.head.visit_params(f);
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.embedding.visit_params_mut(f);
        for l in &mut self.base_layers {
            l.visit_params_mut(f);
        }
        self.base_head.visit_params_mut(f);
        for s in &mut self.stages {
            if let Some(p) = &mut s.projection {
                p.visit_params_mut(f);
            }
            for l in &mut s.layers {
                l.visit_params_mut(f);
            }
            s.head.visit_params_mut(f);
        }
    }
}
