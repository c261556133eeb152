//! Worked examples for EdgeConv, the embedding and the progressive heads.

mod common;

use bitloc_core::codes::GridSpec;
use bitloc_core::geometry::KnnGraph;
use bitloc_net::graphnet::{embedding_width, GraphNet, StagePlan};
use bitloc_net::layers::{edgeconv_backward, edgeconv_forward, EdgeConvLayer, InitEmbedding};
use bitloc_net::tensor::{sigmoid, FeatureMap, NodeFeatures};
use bitloc_net::Error;
use common::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn nf(rows: usize, cols: usize, data: &[f64]) -> NodeFeatures {
    NodeFeatures::from_vec(rows, cols, data.to_vec()).unwrap()
}

#[test]
fn edgeconv_two_node_example() {
    let g = KnnGraph::from_neighbors(1, vec![vec![1], vec![0]]).unwrap();
    let layer = EdgeConvLayer::from_weights(vec![2.0], vec![1.0], 1, 1).unwrap();
    let (out, _) = edgeconv_forward(&nf(2, 1, &[1.0, 3.0]), &g, &layer).unwrap();
    assert_eq!(out.data, vec![5.0, 0.0]);
}

#[test]
fn edgeconv_equal_neighbors_reduce_to_phi() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let g = random_graph(&mut rng, 10, 3);
    let layer = EdgeConvLayer::new("edge", 4, 6, &mut rng);
    let row = random_vec(&mut rng, 4, 1.0);
    let f = nf(10, 4, &row.repeat(10));
    let (out, _) = edgeconv_forward(&f, &g, &layer).unwrap();
    for i in 0..10 {
        for m in 0..6 {
            let z: f64 = (0..4).map(|c| layer.phi.value[m * 4 + c] * row[c]).sum();
            assert!((out.at(i, m) - z.max(0.0)).abs() < 1e-12);
        }
    }
}

#[test]
fn edgeconv_identity_filters() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let g = random_graph(&mut rng, 12, 4);
    let c = 5;
    let mut phi = vec![0.0; c * c];
    (0..c).for_each(|i| phi[i * c + i] = 1.0);
    let layer = EdgeConvLayer::from_weights(vec![0.0; c * c], phi, c, c).unwrap();
    let data: Vec<f64> = random_vec(&mut rng, 12 * c, 1.0).into_iter().map(f64::abs).collect();
    let f = nf(12, c, &data);
    assert_eq!(edgeconv_forward(&f, &g, &layer).unwrap().0.data, data);
}

#[test]
fn edgeconv_shape_errors() {
    let g = KnnGraph::from_neighbors(1, vec![vec![1], vec![0]]).unwrap();
    let layer = EdgeConvLayer::from_weights(vec![1.0; 2], vec![1.0; 2], 1, 2).unwrap();
    assert!(matches!(edgeconv_forward(&nf(2, 1, &[1.0, 2.0]), &g, &layer), Err(Error::InvalidArgument(_))));
    assert!(matches!(edgeconv_forward(&nf(3, 2, &[0.0; 6]), &g, &layer), Err(Error::InvalidArgument(_))));
    assert!(EdgeConvLayer::from_weights(vec![1.0; 3], vec![1.0; 2], 1, 2).is_err());
}

#[test]
fn edgeconv_backward_needs_a_cache() {
    let layer = EdgeConvLayer::from_weights(vec![1.0], vec![1.0], 1, 1).unwrap();
    let err = edgeconv_backward(&layer, None, &nf(1, 1, &[1.0])).unwrap_err();
    assert!(matches!(err, Error::State(_)));
}

#[test]
fn edgeconv_zero_upstream_gives_zero_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let g = random_graph(&mut rng, 8, 3);
    let layer = EdgeConvLayer::new("edge", 3, 4, &mut rng);
    let f = nf(8, 3, &random_vec(&mut rng, 24, 1.0));
    let (_, cache) = edgeconv_forward(&f, &g, &layer).unwrap();
    let grads = edgeconv_backward(&layer, Some(&cache), &NodeFeatures::zeros(8, 4)).unwrap();
    assert!(grads.theta.iter().chain(&grads.phi).chain(&grads.features.data).all(|&v| v == 0.0));
}

#[test]
fn edgeconv_single_edge_chain_rule() {
    // Node 0's only neighbor is node 1 and vice versa; scalar channels.
    let g = KnnGraph::from_neighbors(1, vec![vec![1], vec![0]]).unwrap();
    let (theta, phi) = (0.7, -0.4);
    let f = [1.5, -0.5];
    let layer = EdgeConvLayer::from_weights(vec![theta], vec![phi], 1, 1).unwrap();
    let (out, cache) = edgeconv_forward(&nf(2, 1, &f), &g, &layer).unwrap();
    let up = [1.3, 0.0];
    let grads = edgeconv_backward(&layer, Some(&cache), &nf(2, 1, &up)).unwrap();
    // e_01 = ReLU(θ(f1 − f0) + φ f0) = ReLU(-1.4 − 0.6) = 0 and e_10 = ReLU(1.4 + 0.2) = 1.6.
    assert!((out.data[0] - 0.0).abs() < 1e-12);
    assert!((out.data[1] - 1.6).abs() < 1e-12);
    // Only node 1 is active and its upstream gradient is 0, so everything vanishes.
    assert_eq!(grads.theta, vec![0.0]);
    let up = [0.0, 2.0];
    let grads = edgeconv_backward(&layer, Some(&cache), &nf(2, 1, &up)).unwrap();
    let delta = f[0] - f[1];
    assert!((grads.theta[0] - 2.0 * delta).abs() < 1e-12);
    assert!((grads.phi[0] - 2.0 * f[1]).abs() < 1e-12);
    assert!((grads.features.data[0] - 2.0 * theta).abs() < 1e-12);
    assert!((grads.features.data[1] - 2.0 * (phi - theta)).abs() < 1e-12);
}

#[test]
fn edgeconv_ties_route_to_first_neighbor() {
    // Both neighbors of node 0 carry the same feature.
    let g = KnnGraph::from_neighbors(2, vec![vec![1, 2], vec![0, 2], vec![0, 1]]).unwrap();
    let layer = EdgeConvLayer::from_weights(vec![1.0], vec![1.0], 1, 1).unwrap();
    let (_, cache) = edgeconv_forward(&nf(3, 1, &[0.0, 2.0, 2.0]), &g, &layer).unwrap();
    let grads = edgeconv_backward(&layer, Some(&cache), &nf(3, 1, &[1.0, 0.0, 0.0])).unwrap();
    assert_eq!(grads.features.data[1], 1.0);
    assert_eq!(grads.features.data[2], 0.0);
}

#[test]
fn embedding_width_and_zero_input() {
    assert_eq!(embedding_width(&GridSpec::default()), 64);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut emb = InitEmbedding::new(64, 16, 64, &mut rng);
    emb.bias.value.fill(0.0);
    let out = emb.forward(&FeatureMap::zeros(16, 8, 8)).unwrap();
    assert_eq!((out.rows, out.cols), (64, 64));
    assert!(out.data.iter().all(|&v| v == 0.0));
    assert!(matches!(emb.forward(&FeatureMap::zeros(16, 4, 4)), Err(Error::InvalidArgument(_))));
}

fn default_graph(rng: &mut ChaCha8Rng) -> GraphNet {
    GraphNet::new(64, 64, &[16, 16, 8], GridSpec::default(), StagePlan::default(), rng).unwrap()
}

#[test]
fn stage0_emits_seven_probabilities_per_node() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let net = default_graph(&mut rng);
    let g = random_graph(&mut rng, 64, 16);
    let f = nf(64, 64, &random_vec(&mut rng, 64 * 64, 50.0));
    let out = net.predict_stage0(&f, &g).unwrap();
    let (bx, by) = out.bit_probs();
    let v = out.visible_probs();
    assert_eq!(v.len(), 64);
    assert!(bx.iter().chain(&by).all(|r| r.len() == 3));
    assert!(v.iter().chain(bx.iter().chain(&by).flatten()).all(|p| (0.0..=1.0).contains(p)));
}

#[test]
fn refinement_completes_six_bits_and_rejects_bad_stages() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let net = default_graph(&mut rng);
    let g = random_graph(&mut rng, 64, 16);
    let f0 = FeatureMap::from_vec(64, 8, 8, random_vec(&mut rng, 64 * 64, 1.0)).unwrap();
    let levels = [(16, 16), (16, 32), (8, 64)]
        .map(|(c, s)| FeatureMap::from_vec(c, s, s, random_vec(&mut rng, c * s * s, 1.0)).unwrap());
    let fwd = net.forward(&f0, &levels, &g, 3, bitloc_net::graphnet::FusionSource::Predicted).unwrap();
    assert_eq!(fwd.depth(), 6);
    assert!(fwd.x_logits.iter().chain(&fwd.y_logits).all(|r| r.len() == 6));
    for (j, cells) in fwd.fusion_cells.iter().enumerate() {
        assert!(cells.iter().all(|c| c.level == 3 + j as u32));
    }
    let f = nf(64, 64, &[0.0; 64 * 64]);
    let patches = NodeFeatures::zeros(64, 4 * 16);
    assert!(matches!(net.predict_refinement(&f, &g, 0, &patches), Err(Error::InvalidArgument(_))));
    assert!(matches!(net.predict_refinement(&f, &g, 4, &patches), Err(Error::InvalidArgument(_))));
}

#[test]
fn zero_patch_branch_reduces_to_patch_free_behavior() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut net = default_graph(&mut rng);
    let g = random_graph(&mut rng, 64, 16);
    let f = nf(64, 64, &random_vec(&mut rng, 64 * 64, 1.0));
    let width = 4 * 16;
    // Zero the projection columns that read the patch.
    let proj = net.stages[0].projection.as_mut().unwrap();
    let cols = proj.inputs();
    for r in 0..proj.outputs() {
        proj.weight.value[r * cols + 64..(r + 1) * cols].fill(0.0);
    }
    let zero = NodeFeatures::zeros(64, width);
    let random = nf(64, width, &random_vec(&mut rng, 64 * width, 1.0));
    let a = net.predict_refinement(&f, &g, 1, &zero).unwrap();
    let b = net.predict_refinement(&f, &g, 1, &random).unwrap();
    assert_eq!(a.x_logits, b.x_logits);
    assert_eq!(a.y_logits, b.y_logits);
    assert!(a.bit_probs().0.iter().all(|p| (0.0..=1.0).contains(p)));
}

#[test]
fn forward_is_bitwise_reproducible() {
    let build = || {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let net = default_graph(&mut rng);
        let g = random_graph(&mut rng, 64, 16);
        let f = nf(64, 64, &random_vec(&mut rng, 64 * 64, 1.0));
        let out = net.predict_stage0(&f, &g).unwrap();
        (out.visible_logits, out.x_logits)
    };
    assert_eq!(build(), build());
}

#[test]
fn heads_saturate_to_valid_probabilities() {
    assert_eq!(sigmoid(1000.0), 1.0);
    assert_eq!(sigmoid(-1000.0), 0.0);
    assert!((sigmoid(0.0) - 0.5).abs() < 1e-15);
}
