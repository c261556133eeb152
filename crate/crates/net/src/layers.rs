//! Node-wise layers: linear maps, shared MLP heads, EdgeConv and the initial
//! graph embedding.

use std::collections::hash_map::DefaultHasher;
use std::hash::Hasher;

use bitloc_core::geometry::KnnGraph;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::linalg::gemm;
use crate::param::{Param, Parameterized};
use crate::tensor::{hash_signs, relu_backward_inplace, relu_inplace, FeatureMap, NodeFeatures};

/// `Y = X Wᵀ + b`, applied to every node.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// `out × in`.
    pub weight: Param,
    pub bias: Param,
}

impl Linear {
    pub fn new(name: &str, inputs: usize, outputs: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            weight: Param::uniform(format!("{name}.weight"), &[outputs, inputs], inputs, rng),
            bias: Param::uniform(format!("{name}.bias"), &[outputs], inputs, rng),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.shape[1]
    }

    pub fn outputs(&self) -> usize {
        self.weight.shape[0]
    }

    pub fn forward(&self, x: &NodeFeatures) -> Result<NodeFeatures> {
        if x.cols != self.inputs() {
            return Err(Error::invalid(format!(
                "{}: expected {} input columns, got {}",
                self.weight.name,
                self.inputs(),
                x.cols
            )));
        }
        let mut y = NodeFeatures::zeros(x.rows, self.outputs());
        gemm(x.rows, x.cols, y.cols, &x.data, false, &self.weight.value, true, &mut y.data, false);
        for i in 0..y.rows {
            for (v, b) in y.row_mut(i).iter_mut().zip(&self.bias.value) {
                *v += b;
            }
        }
        Ok(y)
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(&mut self, x: &NodeFeatures, dy: &NodeFeatures) -> NodeFeatures {
        let (n, i, o) = (x.rows, self.inputs(), self.outputs());
        gemm(o, n, i, &dy.data, true, &x.data, false, &mut self.weight.grad, true);
        for r in 0..n {
            for (g, d) in self.bias.grad.iter_mut().zip(dy.row(r)) {
                *g += d;
            }
        }
        let mut dx = NodeFeatures::zeros(n, i);
        gemm(n, o, i, &dy.data, false, &self.weight.value, false, &mut dx.data, false);
        dx
    }
}

impl Parameterized for Linear {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        f(&self.weight);
        f(&self.bias);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

/// Two-layer perceptron shared by all nodes; returns logits.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub hidden: Linear,
    pub output: Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpCache {
    input: NodeFeatures,
    hidden: NodeFeatures,
}

impl MlpCache {
    pub fn branch_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        hash_signs(&mut h, &self.hidden.data);
        h.finish()
    }
}

impl Mlp {
    pub fn new(name: &str, inputs: usize, hidden: usize, outputs: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            hidden: Linear::new(&format!("{name}.0"), inputs, hidden, rng),
            output: Linear::new(&format!("{name}.1"), hidden, outputs, rng),
        }
    }

    pub fn forward(&self, x: &NodeFeatures) -> Result<(NodeFeatures, MlpCache)> {
        let mut h = self.hidden.forward(x)?;
        relu_inplace(&mut h.data);
        let y = self.output.forward(&h)?;
        Ok((
            y,
            MlpCache {
                input: x.clone(),
                hidden: h,
            },
        ))
    }

    pub fn backward(&mut self, cache: &MlpCache, dy: &NodeFeatures) -> NodeFeatures {
        let mut dh = self.output.backward(&cache.hidden, dy);
        relu_backward_inplace(&mut dh.data, &cache.hidden.data);
        self.hidden.backward(&cache.input, &dh)
    }
}

impl Parameterized for Mlp {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        self.hidden.visit_params(f);
        self.output.visit_params(f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.hidden.visit_params_mut(f);
        self.output.visit_params_mut(f);
    }
}

/// EdgeConv filters: `e_ij = ReLU(θ(f_j − f_i) + φ f_i)`.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeConvLayer {
    /// `C_out × C_in`.
    pub theta: Param,
    /// `C_out × C_in`.
    pub phi: Param,
}

/// Forward state needed by [`edgeconv_backward`].
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeConvCache {
    input: NodeFeatures,
    /// Winning neighbor per (node, channel).
    argmax: Vec<usize>,
    /// Pre-activation value of the winning edge per (node, channel).
    pre: Vec<f64>,
}

impl EdgeConvCache {
    /// Hash of the winning edges and ReLU decisions.
    pub fn branch_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for &a in &self.argmax {
            h.write_usize(a);
        }
        hash_signs(&mut h, &self.pre);
        h.finish()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EdgeConvGrads {
    pub features: NodeFeatures,
    pub theta: Vec<f64>,
    pub phi: Vec<f64>,
}

impl EdgeConvLayer {
    pub fn new(name: &str, inputs: usize, outputs: usize, rng: &mut ChaCha8Rng) -> Self {
        // θ(f_j − f_i) + φ f_i sees two input vectors.
        let fan_in = 2 * inputs;
        Self {
            theta: Param::uniform(format!("{name}.theta"), &[outputs, inputs], fan_in, rng),
            phi: Param::uniform(format!("{name}.phi"), &[outputs, inputs], fan_in, rng),
        }
    }

    pub fn from_weights(theta: Vec<f64>, phi: Vec<f64>, outputs: usize, inputs: usize) -> Result<Self> {
        if theta.len() != outputs * inputs || phi.len() != outputs * inputs {
            return Err(Error::invalid("EdgeConv weights do not match the stated shape"));
        }
        let mut t = Param::zeros("theta", &[outputs, inputs]);
        t.value = theta;
        let mut p = Param::zeros("phi", &[outputs, inputs]);
        p.value = phi;
        Ok(Self { theta: t, phi: p })
    }

    pub fn inputs(&self) -> usize {
        self.theta.shape[1]
    }

    pub fn outputs(&self) -> usize {
        self.theta.shape[0]
    }
}

impl Parameterized for EdgeConvLayer {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        f(&self.theta);
        f(&self.phi);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.theta);
        f(&mut self.phi);
    }
}

/// One EdgeConv layer with max aggregation over each node's out-edges.
///
/// Since ReLU is monotone, `max_j ReLU(a_j + b_i) = ReLU(max_j a_j + b_i)` with
/// `a = F θᵀ` and `b = F (φ − θ)ᵀ`, so only the winning neighbor is kept.
pub fn edgeconv_forward(
    f: &NodeFeatures,
    g: &KnnGraph,
    layer: &EdgeConvLayer,
) -> Result<(NodeFeatures, EdgeConvCache)> {
    let (n, cin, cout) = (f.rows, layer.inputs(), layer.outputs());
    if n != g.node_count() || f.cols != cin {
        return Err(Error::invalid(format!(
            "EdgeConv input {}×{} does not match graph of {} nodes and {cin} channels",
            f.rows,
            f.cols,
            g.node_count()
        )));
    }
    let diff: Vec<f64> = layer.phi.value.iter().zip(&layer.theta.value).map(|(p, t)| p - t).collect();
    let mut a = vec![0.0; n * cout];
    let mut b = vec![0.0; n * cout];
    gemm(n, cin, cout, &f.data, false, &layer.theta.value, true, &mut a, false);
    gemm(n, cin, cout, &f.data, false, &diff, true, &mut b, false);

    let mut out = NodeFeatures::zeros(n, cout);
    let mut argmax = vec![0usize; n * cout];
    let mut pre = vec![0.0; n * cout];
    for i in 0..n {
        let nbrs = g.neighbors(i);
        if nbrs.is_empty() {
            return Err(Error::invalid(format!("node {i} has no out-edges")));
        }
        for m in 0..cout {
            let mut best = nbrs[0];
            let mut best_val = a[best * cout + m];
            for &j in &nbrs[1..] {
                let v = a[j * cout + m];
                if v > best_val {
                    best = j;
                    best_val = v;
                }
            }
            let z = best_val + b[i * cout + m];
            argmax[i * cout + m] = best;
            pre[i * cout + m] = z;
            out.data[i * cout + m] = if z > 0.0 { z } else { 0.0 };
        }
    }
    Ok((
        out,
        EdgeConvCache {
            input: f.clone(),
            argmax,
            pre,
        },
    ))
}

/// Gradients of one EdgeConv layer. The max routes to the cached winning edge
/// (ties resolved to the lowest edge index in the forward pass) and ReLU has
/// derivative 0 at 0.
pub fn edgeconv_backward(
    layer: &EdgeConvLayer,
    cache: Option<&EdgeConvCache>,
    upstream: &NodeFeatures,
) -> Result<EdgeConvGrads> {
    let cache = cache.ok_or_else(|| Error::State("EdgeConv backward called before forward".into()))?;
    let (n, cin, cout) = (cache.input.rows, layer.inputs(), layer.outputs());
    if upstream.rows != n || upstream.cols != cout {
        return Err(Error::invalid("EdgeConv upstream gradient shape mismatch"));
    }
    let mut da = vec![0.0; n * cout];
    let mut db = vec![0.0; n * cout];
    for i in 0..n {
        for m in 0..cout {
            let k = i * cout + m;
            if cache.pre[k] > 0.0 {
                let g = upstream.data[k];
                da[cache.argmax[k] * cout + m] += g;
                db[k] += g;
            }
        }
    }
    let f = &cache.input.data;
    let mut dtheta = vec![0.0; cout * cin];
    let mut dphi = vec![0.0; cout * cin];
    gemm(cout, n, cin, &da, true, f, false, &mut dtheta, false);
    gemm(cout, n, cin, &db, true, f, false, &mut dphi, false);
    for (t, p) in dtheta.iter_mut().zip(&dphi) {
        *t -= p;
    }
    let diff: Vec<f64> = layer.phi.value.iter().zip(&layer.theta.value).map(|(p, t)| p - t).collect();
    let mut df = NodeFeatures::zeros(n, cin);
    gemm(n, cout, cin, &da, false, &layer.theta.value, false, &mut df.data, false);
    gemm(n, cout, cin, &db, false, &diff, false, &mut df.data, true);
    Ok(EdgeConvGrads {
        features: df,
        theta: dtheta,
        phi: dphi,
    })
}

/// Runs [`edgeconv_backward`] and accumulates the filter gradients into the layer.
pub(crate) fn edgeconv_accumulate(
    layer: &mut EdgeConvLayer,
    cache: &EdgeConvCache,
    upstream: &NodeFeatures,
) -> Result<NodeFeatures> {
    let g = edgeconv_backward(layer, Some(cache), upstream)?;
    for (a, b) in layer.theta.grad.iter_mut().zip(&g.theta) {
        *a += b;
    }
    for (a, b) in layer.phi.grad.iter_mut().zip(&g.phi) {
        *a += b;
    }
    Ok(g.features)
}

/// Initial node embeddings from the base feature map: the `C_0 × S²` flattened
/// map is mixed across channels by an `N × C_0` matrix, plus a per-node,
/// per-cell bias of shape `N × S²`.
#[derive(Debug, Clone, PartialEq)]
pub struct InitEmbedding {
    pub weight: Param,
    pub bias: Param,
}

impl InitEmbedding {
    pub fn new(nodes: usize, channels: usize, cells: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            weight: Param::uniform("embedding.weight", &[nodes, channels], channels, rng),
            bias: Param::uniform("embedding.bias", &[nodes, cells], channels, rng),
        }
    }

    pub fn nodes(&self) -> usize {
        self.weight.shape[0]
    }

    pub fn forward(&self, f0: &FeatureMap) -> Result<NodeFeatures> {
        let (n, c) = (self.weight.shape[0], self.weight.shape[1]);
        let cells = self.bias.shape[1];
        if f0.channels != c || f0.plane() != cells {
            return Err(Error::invalid(format!(
                "embedding expects a {c}-channel map with {cells} cells, got {}×{}×{}",
                f0.channels, f0.height, f0.width
            )));
        }
        let mut out = NodeFeatures::zeros(n, cells);
        out.data.copy_from_slice(&self.bias.value);
        gemm(n, c, cells, &self.weight.value, false, &f0.data, false, &mut out.data, true);
        Ok(out)
    }

    /// Accumulates parameter gradients and returns the gradient on `f0`.
    pub fn backward(&mut self, f0: &FeatureMap, dy: &NodeFeatures) -> FeatureMap {
        let (n, c) = (self.weight.shape[0], self.weight.shape[1]);
        let cells = f0.plane();
        gemm(n, cells, c, &dy.data, false, &f0.data, true, &mut self.weight.grad, true);
        for (g, d) in self.bias.grad.iter_mut().zip(&dy.data) {
            *g += d;
        }
        let mut df = FeatureMap::zeros(f0.channels, f0.height, f0.width);
        gemm(c, n, cells, &self.weight.value, true, &dy.data, false, &mut df.data, false);
        df
    }
}

impl Parameterized for InitEmbedding {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        f(&self.weight);
        f(&self.bias);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}
