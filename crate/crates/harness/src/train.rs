//! Two-phase toy training of the full network on synthetic scenes.

use bitloc_core::geometry::{build_knn_graph, farthest_point_sample, KnnGraph};
use bitloc_net::loss::LossBreakdown;
use bitloc_net::model::{Phase, PoseNet, Targets};
use bitloc_net::optim::{Adam, AdamConfig};
use bitloc_net::param::Parameterized;
use nalgebra::Point3;
use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::object::SceneObject;
use crate::parallel::map_indexed;
use crate::pipeline::{localization_errors, median};
use crate::scene::{generate_scenes, rotate_quarter, SceneSample};
use crate::seeds::{SeedStream, Stream};

/// Training scenes scored at every evaluation, taken from the front of the training set.
pub const TRAIN_EVAL_SCENES: usize = 50;

/// The keypoints, their graph and the train/test scenes of one toy run.
#[derive(Debug, Clone)]
pub struct ToyDataset {
    pub object: SceneObject,
    pub keypoints: Vec<Point3<f64>>,
    pub graph: KnnGraph,
    pub train: Vec<SceneSample>,
    pub test: Vec<SceneSample>,
}

impl ToyDataset {
    pub fn generate(cfg: &RunConfig) -> Result<Self> {
        let t = &cfg.train;
        let object = SceneObject::from_config(&cfg.object)?;
        let keypoints = farthest_point_sample(&object.model, t.nodes, 0)?.points;
        let graph = build_knn_graph(&keypoints, t.knn)?;
        let scenes = |count, stream| {
            let seeds = SeedStream::new(cfg.seed, stream);
            generate_scenes(&object, &keypoints, &cfg.intrinsics, &cfg.pose, &cfg.grid, count, |i| seeds.seed(i))
        };
        let train = scenes(t.train_scenes, Stream::TrainScenes)?;
        let test = scenes(t.test_scenes, Stream::TestScenes)?;
        Ok(Self {
            object,
            keypoints,
            graph,
            train,
            test,
        })
    }
}

/// Scores after `step` optimizer updates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: usize,
    /// Full objective averaged over the scored training scenes, with
    /// features fused as in training.
    pub train_loss: LossBreakdown,
    /// Total of the same objective with fusion at predicted cells, as at inference.
    pub predicted_fusion_loss: f64,
    /// Median localization error in RoI pixels over held-out keypoints visible in the ground truth.
    pub test_median_px: f64,
    pub train_median_px: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub phase: Phase,
    /// Batch-mean objective of the phase, before the update.
    pub loss: LossBreakdown,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub evals: Vec<EvalRecord>,
}

impl TrainLog {
    pub fn first_eval(&self) -> Option<&EvalRecord> {
        self.evals.first()
    }

    pub fn last_eval(&self) -> Option<&EvalRecord> {
        self.evals.last()
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub net: PoseNet,
    pub log: TrainLog,
}

fn targets(s: &SceneSample) -> Targets<'_> {
    Targets {
        codes: &s.gt_codes,
        mask_full: &s.gt_masks.full.data,
        mask_visible: &s.gt_masks.visible.data,
    }
}

/// Full-objective loss and median localization error over `scenes`. The
/// loss fuses features the way training does, at the target cells when
/// `teacher_forcing` is set.
pub fn evaluate(
    net: &PoseNet,
    graph: &KnnGraph,
    scenes: &[SceneSample],
    teacher_forcing: bool,
) -> Result<(LossBreakdown, f64)> {
    let (loss, _, median) = evaluate_both(net, graph, scenes, teacher_forcing)?;
    Ok((loss, median))
}

/// As [`evaluate`], also returning the total loss with fusion at predicted cells.
fn evaluate_both(
    net: &PoseNet,
    graph: &KnnGraph,
    scenes: &[SceneSample],
    teacher_forcing: bool,
) -> Result<(LossBreakdown, f64, f64)> {
    let grid = net.config.grid;
    let per_scene = map_indexed(scenes.len(), |i| -> Result<(LossBreakdown, f64, Vec<f64>)> {
        let s = &scenes[i];
        let loss = net.loss_with(&s.image, graph, targets(s), Phase::Full, teacher_forcing)?;
        let predicted = if teacher_forcing {
            net.loss(&s.image, graph, targets(s), Phase::Full)?.total
        } else {
            loss.total
        };
        let pred = net.predict(&s.image, graph)?;
        Ok((loss, predicted, localization_errors(&pred.codes, s, &grid, grid.depth)?))
    });
    let mut losses = Vec::with_capacity(scenes.len());
    let mut predicted = Vec::with_capacity(scenes.len());
    let mut errors = Vec::new();
    for r in per_scene {
        let (l, p, e) = r?;
        losses.push(l);
        predicted.push(p);
        errors.extend(e);
    }
    let predicted_mean = predicted.iter().sum::<f64>() / predicted.len().max(1) as f64;
    Ok((LossBreakdown::mean(&losses), predicted_mean, median(&errors).unwrap_or(f64::NAN)))
}

/// Median localization error over `scenes`, without computing losses.
fn held_out_median(net: &PoseNet, graph: &KnnGraph, scenes: &[SceneSample]) -> Result<f64> {
    let grid = net.config.grid;
    let per_scene = map_indexed(scenes.len(), |i| -> Result<Vec<f64>> {
        let pred = net.predict(&scenes[i].image, graph)?;
        localization_errors(&pred.codes, &scenes[i], &grid, grid.depth)
    });
    let mut errors = Vec::new();
    for r in per_scene {
        errors.extend(r?);
    }
    Ok(median(&errors).unwrap_or(f64::NAN))
}

/// Trains a fresh network: `pretrain_steps` of [`Phase::Pretrain`] at
/// `lr_pretrain`, then a new Adam state at `lr` for the remaining steps of
/// [`Phase::Full`]. Evaluations run before the first update, every
/// `eval_interval` updates and after the last one.
pub fn train_toy(cfg: &RunConfig, data: &ToyDataset) -> Result<TrainOutcome> {
    let t = &cfg.train;
    if data.train.is_empty() {
        return Err(Error::config("training needs at least one scene"));
    }
    let mut net = PoseNet::new(cfg.net_config(), SeedStream::new(cfg.seed, Stream::Network).seed(0))?;
    let mut batch_rng = ChaCha8Rng::seed_from_u64(SeedStream::new(cfg.seed, Stream::Batches).seed(0));
    let train_eval = &data.train[..data.train.len().min(TRAIN_EVAL_SCENES)];
    let test_eval = if data.test.is_empty() { train_eval } else { &data.test[..] };
    let mut log = TrainLog::default();
    let record_eval = |net: &PoseNet, step: usize, log: &mut TrainLog| -> Result<()> {
        let (train_loss, predicted_fusion_loss, train_median_px) =
            evaluate_both(net, &data.graph, train_eval, t.teacher_forcing)?;
        let test_median_px = held_out_median(net, &data.graph, test_eval)?;
        log::info!("step {step}: loss {:.4} ({predicted_fusion_loss:.4} predicted fusion), test median {test_median_px:.2} px", train_loss.total);
        log.evals.push(EvalRecord {
            step,
            train_loss,
            predicted_fusion_loss,
            test_median_px,
            train_median_px,
        });
        Ok(())
    };

    record_eval(&net, 0, &mut log)?;
    let batch = t.batch.min(data.train.len());
    let mut adam = Adam::new(AdamConfig {
        lr: t.lr_pretrain,
        ..AdamConfig::default()
    });
    for step in 0..t.steps {
        let phase = if step < t.pretrain_steps { Phase::Pretrain } else { Phase::Full };
        if step == t.pretrain_steps && step > 0 {
            adam = Adam::new(AdamConfig {
                lr: t.lr,
                ..AdamConfig::default()
            });
        } else if step == 0 && t.pretrain_steps == 0 {
            adam.config.lr = t.lr;
        }
        net.zero_grad();
        let mut parts = Vec::with_capacity(batch);
        for i in sample_indices(&mut batch_rng, data.train.len(), batch).into_vec() {
            let turns = if t.augment { batch_rng.gen_range(0..4) } else { 0 };
            let rotated;
            let s = if turns == 0 {
                &data.train[i]
            } else {
                rotated = rotate_quarter(&data.train[i], turns, &cfg.grid);
                &rotated
            };
            let loss = net
                .accumulate_gradients(&s.image, &data.graph, targets(s), phase, t.teacher_forcing, 1.0 / batch as f64)
                .map_err(|e| match e {
                    bitloc_net::Error::State(detail) => Error::Divergence { step, detail },
                    other => other.into(),
                })?;
            parts.push(loss);
        }
        let loss = LossBreakdown::mean(&parts);
        if !loss.is_finite() {
            return Err(Error::Divergence {
                step,
                detail: format!("non-finite batch loss {loss:?}"),
            });
        }
        adam.step(&mut net);
        log.steps.push(StepRecord { step, phase, loss });
        let done = step + 1;
        if done % t.eval_interval == 0 || done == t.steps {
            record_eval(&net, done, &mut log)?;
        }
    }
    Ok(TrainOutcome { net, log })
}
