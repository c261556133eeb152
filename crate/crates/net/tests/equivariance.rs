//! Relabeling the keypoints permutes every graph-branch output exactly.

mod common;

use bitloc_core::codes::{BinaryCodeSet, KeypointCode};
use bitloc_core::geometry::KnnGraph;
use bitloc_net::graphnet::FusionSource;
use bitloc_net::layers::{edgeconv_forward, EdgeConvLayer};
use bitloc_net::model::{NetConfig, PoseNet};
use bitloc_net::param::Param;
use bitloc_net::tensor::{FeatureMap, NodeFeatures};
use common::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn permute_rows(p: &mut Param, perm: &[usize]) {
    let cols = p.shape[1];
    let mut out = vec![0.0; p.value.len()];
    for (i, &to) in perm.iter().enumerate() {
        out[to * cols..(to + 1) * cols].copy_from_slice(&p.value[i * cols..(i + 1) * cols]);
    }
    p.value = out;
}

fn permute<T: Clone>(v: &[T], perm: &[usize]) -> Vec<T> {
    let mut out = v.to_vec();
    for (i, &to) in perm.iter().enumerate() {
        out[to] = v[i].clone();
    }
    out
}

fn random_codes(rng: &mut ChaCha8Rng, n: usize, depth: u32) -> BinaryCodeSet {
    let codes = (0..n)
        .map(|_| {
            if rng.gen_bool(0.2) {
                KeypointCode::invisible(depth)
            } else {
                KeypointCode {
                    visible: true,
                    x: (0..depth).map(|_| rng.gen_bool(0.5)).collect(),
                    y: (0..depth).map(|_| rng.gen_bool(0.5)).collect(),
                }
            }
        })
        .collect();
    BinaryCodeSet::new(depth, codes).unwrap()
}

fn check_instance(cfg: NetConfig, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let net = PoseNet::new(cfg.clone(), seed).unwrap();
    let n = cfg.nodes;
    let roi = cfg.grid.roi_size as usize;
    let image = FeatureMap::from_vec(3, roi, roi, random_vec(&mut rng, 3 * roi * roi, 1.0)).unwrap();
    let g = random_graph(&mut rng, n, 8.min(n - 1));
    let codes = random_codes(&mut rng, n, cfg.grid.depth);
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng);

    let mut moved = net.clone();
    permute_rows(&mut moved.graph.embedding.weight, &perm);
    permute_rows(&mut moved.graph.embedding.bias, &perm);
    let g_moved: KnnGraph = g.permuted(&perm);
    let codes_moved = permute(&codes.codes, &perm);

    let enc = net.backbone.encode_image(&image).unwrap();
    let dec = net.backbone.decode_pyramid(&enc).unwrap();
    let stages = net.graph.stages.len();
    for teacher in [false, true] {
        let (src, src_moved) = if teacher {
            (FusionSource::Teacher(&codes.codes), FusionSource::Teacher(&codes_moved))
        } else {
            (FusionSource::Predicted, FusionSource::Predicted)
        };
        let a = net.graph.forward(enc.base(), &dec.levels, &g, stages, src).unwrap();
        let b = moved.graph.forward(enc.base(), &dec.levels, &g_moved, stages, src_moved).unwrap();
        assert_eq!(permute(&a.visible_logits, &perm), b.visible_logits);
        assert_eq!(permute(&a.x_logits, &perm), b.x_logits);
        assert_eq!(permute(&a.y_logits, &perm), b.y_logits);
        for (ca, cb) in a.fusion_cells.iter().zip(&b.fusion_cells) {
            assert_eq!(&permute(ca, &perm), cb);
        }
        let fa = a.final_features();
        let fb = b.final_features();
        for i in 0..n {
            assert_eq!(fa.row(i), fb.row(perm[i]));
        }
    }
    let pa = net.predict(&image, &g).unwrap();
    let pb = moved.predict(&image, &g_moved).unwrap();
    assert_eq!(permute(&pa.codes.codes, &perm), pb.codes.codes);
    assert_eq!(pa.masks, pb.masks);
}

pub fn graph_forward_commutes_with_node_permutations() {
    for seed in 0..8 {
        check_instance(tiny_config(12 + seed as usize), seed);
    }
    for seed in 8..10 {
        check_instance(NetConfig::default(), seed);
    }
}

pub fn edgeconv_is_local_to_the_out_neighborhood() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (n, c) = (16, 8);
    let g = random_graph(&mut rng, n, 4);
    let layer = EdgeConvLayer::new("edge", c, c, &mut rng);
    let f = NodeFeatures::from_vec(n, c, random_vec(&mut rng, n * c, 1.0)).unwrap();
    let (out, _) = edgeconv_forward(&f, &g, &layer).unwrap();
    for i in 0..n {
        for j in (0..n).filter(|j| *j != i && !g.neighbors(i).contains(j)) {
            let mut f2 = f.clone();
            f2.row_mut(j).iter_mut().for_each(|v| *v += 10.0);
            let (out2, _) = edgeconv_forward(&f2, &g, &layer).unwrap();
            assert_eq!(out.row(i), out2.row(i), "node {i} changed when node {j} moved");
        }
    }
}

/// Every check in this file, by name.
#[allow(dead_code)]
pub const SUITE: &[(&str, fn())] = &[
    ("graph_forward_commutes_with_node_permutations", graph_forward_commutes_with_node_permutations),
    ("edgeconv_is_local_to_the_out_neighborhood", edgeconv_is_local_to_the_out_neighborhood),
];

mod checks {
    #[test]
    fn graph_forward_commutes_with_node_permutations() {
        super::graph_forward_commutes_with_node_permutations();
    }

    #[test]
    fn edgeconv_is_local_to_the_out_neighborhood() {
        super::edgeconv_is_local_to_the_out_neighborhood();
    }
}
