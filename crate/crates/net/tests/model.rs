//! Whole-network behavior: training-step plumbing, checkpoints and optimization.

mod common;

use bitloc_core::codes::{BinaryCodeSet, KeypointCode};
use bitloc_net::checkpoint;
use bitloc_net::model::{NetConfig, Phase, PoseNet, Targets};
use bitloc_net::optim::{Adam, AdamConfig};
use bitloc_net::param::Parameterized;
use bitloc_net::tensor::FeatureMap;
use bitloc_net::Error;
use common::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn codes(rng: &mut ChaCha8Rng, n: usize, depth: u32) -> BinaryCodeSet {
    let codes = (0..n)
        .map(|_| KeypointCode {
            visible: true,
            x: (0..depth).map(|_| rng.gen_bool(0.5)).collect(),
            y: (0..depth).map(|_| rng.gen_bool(0.5)).collect(),
        })
        .collect();
    BinaryCodeSet::new(depth, codes).unwrap()
}

struct Sample {
    image: FeatureMap,
    codes: BinaryCodeSet,
    full: Vec<bool>,
    visible: Vec<bool>,
}

fn sample(cfg: &NetConfig, rng: &mut ChaCha8Rng) -> Sample {
    let roi = cfg.grid.roi_size as usize;
    let cells = 1usize << (2 * cfg.grid.depth);
    Sample {
        image: FeatureMap::from_vec(3, roi, roi, random_vec(rng, 3 * roi * roi, 1.0)).unwrap(),
        codes: codes(rng, cfg.nodes, cfg.grid.depth),
        full: (0..cells).map(|i| i % 3 == 0).collect(),
        visible: (0..cells).map(|i| i % 6 == 0).collect(),
    }
}

fn targets(s: &Sample) -> Targets<'_> {
    Targets {
        codes: &s.codes,
        mask_full: &s.full,
        mask_visible: &s.visible,
    }
}

fn grads(net: &PoseNet) -> Vec<f64> {
    let mut out = Vec::new();
    net.visit_params(&mut |p| out.extend_from_slice(&p.grad));
    out
}

#[test]
fn gradients_scale_linearly_and_accumulate() {
    let cfg = tiny_config(10);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let g = random_graph(&mut rng, 10, 4);
    let s = sample(&cfg, &mut rng);
    let mut net = PoseNet::new(cfg, 3).unwrap();
    let a = net.accumulate_gradients(&s.image, &g, targets(&s), Phase::Full, false, 1.0).unwrap();
    let once = grads(&net);
    let b = net.accumulate_gradients(&s.image, &g, targets(&s), Phase::Full, false, 0.5).unwrap();
    assert_eq!(a, b);
    for (x, y) in once.iter().zip(grads(&net)) {
        assert!((1.5 * x - y).abs() <= 1e-12 * (1.0 + x.abs()));
    }
    assert_eq!(a.total, a.l_v + a.l_x + a.l_y + a.l_mask);
}

#[test]
fn loss_matches_the_training_objective() {
    let cfg = tiny_config(10);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let g = random_graph(&mut rng, 10, 4);
    let s = sample(&cfg, &mut rng);
    let mut net = PoseNet::new(cfg, 5).unwrap();
    for phase in [Phase::Pretrain, Phase::Full] {
        let l = net.loss(&s.image, &g, targets(&s), phase).unwrap();
        let a = net.accumulate_gradients(&s.image, &g, targets(&s), phase, false, 1.0).unwrap();
        assert_eq!(l, a);
    }
    let bad = BinaryCodeSet::new(net.config.grid.depth, Vec::new()).unwrap();
    let t = Targets { codes: &bad, ..targets(&s) };
    assert!(net.loss(&s.image, &g, t, Phase::Full).is_err());
}

#[test]
fn pretrain_phase_leaves_refinement_stages_untouched() {
    let cfg = tiny_config(10);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let g = random_graph(&mut rng, 10, 4);
    let s = sample(&cfg, &mut rng);
    let mut net = PoseNet::new(cfg, 4).unwrap();
    net.accumulate_gradients(&s.image, &g, targets(&s), Phase::Pretrain, false, 1.0).unwrap();
    let mut refine_grad = 0.0;
    let mut base_grad = 0.0;
    net.visit_params(&mut |p| {
        let norm: f64 = p.grad.iter().map(|v| v.abs()).sum();
        if p.name.starts_with("stage1") || p.name.starts_with("stage2") {
            refine_grad += norm;
        } else if p.name.starts_with("stage0") {
            base_grad += norm;
        }
    });
    assert_eq!(refine_grad, 0.0);
    assert!(base_grad > 0.0);
}

#[test]
fn mismatched_targets_are_rejected() {
    let cfg = tiny_config(10);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let g = random_graph(&mut rng, 10, 4);
    let mut s = sample(&cfg, &mut rng);
    s.codes = codes(&mut rng, 9, cfg.grid.depth);
    let mut net = PoseNet::new(cfg, 5).unwrap();
    let err = net.accumulate_gradients(&s.image, &g, targets(&s), Phase::Full, false, 1.0).unwrap_err();
    assert!(matches!(err, Error::InvalidArgument(_)));
    let wrong_graph = random_graph(&mut rng, 11, 4);
    assert!(net.predict(&s.image, &wrong_graph).is_err());
    let small = FeatureMap::zeros(3, 16, 16);
    assert!(net.predict(&small, &g).is_err());
}

#[test]
fn checkpoint_round_trip() {
    let cfg = tiny_config(10);
    let net = PoseNet::new(cfg.clone(), 6).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("net.ckpt");
    checkpoint::save(&net, &path).unwrap();
    let mut restored = PoseNet::new(cfg.clone(), 7).unwrap();
    checkpoint::load(&mut restored, &path).unwrap();
    let mut expected = Vec::new();
    net.visit_params(&mut |p| expected.extend(p.value.iter().map(|&v| v as f32 as f64)));
    let mut got = Vec::new();
    restored.visit_params(&mut |p| got.extend_from_slice(&p.value));
    assert_eq!(expected, got);
    assert_eq!(checkpoint::to_bytes(&net), checkpoint::to_bytes(&restored));

    let mut other = PoseNet::new(tiny_config(11), 8).unwrap();
    assert!(matches!(checkpoint::load(&mut other, &path), Err(Error::Checkpoint(_))));
    let mut bytes = checkpoint::to_bytes(&net);
    bytes[0] = b'X';
    assert!(matches!(checkpoint::from_bytes(&mut restored, &bytes), Err(Error::Checkpoint(_))));
    let bytes = checkpoint::to_bytes(&net);
    assert!(checkpoint::from_bytes(&mut restored, &bytes[..bytes.len() - 3]).is_err());
    assert!(matches!(checkpoint::load(&mut restored, &dir.path().join("missing")), Err(Error::Io(_))));
}

#[test]
fn adam_reduces_the_loss_on_a_fixed_sample() {
    let cfg = tiny_config(10);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let g = random_graph(&mut rng, 10, 4);
    let s = sample(&cfg, &mut rng);
    let mut net = PoseNet::new(cfg, 10).unwrap();
    let mut adam = Adam::new(AdamConfig::default());
    let mut first = None;
    let mut last = 0.0;
    for _ in 0..60 {
        net.zero_grad();
        let l = net.accumulate_gradients(&s.image, &g, targets(&s), Phase::Full, false, 1.0).unwrap();
        first.get_or_insert(l.total);
        last = l.total;
        adam.step(&mut net);
    }
    assert!(last < 0.7 * first.unwrap(), "loss went from {first:?} to {last}");
    assert_eq!(adam.steps_taken(), 60);
}

#[test]
fn default_network_shapes() {
    let net = PoseNet::new(NetConfig::default(), 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let g = random_graph(&mut rng, 64, 16);
    let image = FeatureMap::from_vec(3, 256, 256, random_vec(&mut rng, 3 * 256 * 256, 1.0)).unwrap();
    let p = net.predict(&image, &g).unwrap();
    assert_eq!(p.codes.depth, 6);
    assert_eq!(p.codes.codes.len(), 64);
    assert_eq!(p.masks.side, 64);
    assert_eq!(p.fusion_cells.len(), 3);
    assert!(p.masks.full.iter().chain(&p.masks.visible).all(|v| (0.0..=1.0).contains(v)));
}
