use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::network::{length_loss, loss_and_gradients};
use super::params::{LengthModelParams, ModelDims};
use super::predict_sequence;
use crate::augment::{
    augment_sequence, flip_keypoints, gen_lengths_normal, gen_lengths_synthetic,
    gen_lengths_uniform, mirror_lengths, AugmentationConfig, LengthBank,
};
use crate::camera::{normalize_keypoints, CameraIntrinsics, KeypointSequence};
use crate::error::{Error, Result};
use crate::rng;
use crate::skeleton::{BoneLengths, PoseSequence, SkeletonTopology};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Frames per training segment; remainders are dropped.
    pub sequence_length: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Per-epoch multiplicative decay of the learning rate.
    pub lr_decay: f64,
    pub epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
    pub c: usize,
    pub c_prime: usize,
    pub bidirectional: bool,
    /// Add a mirrored copy of every sample at train time and average the
    /// mirrored prediction at validation time.
    pub flip: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            sequence_length: 512,
            batch_size: 256,
            learning_rate: 1e-4,
            lr_decay: 0.95,
            epochs: 10,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 0,
            c: 256,
            c_prime: 512,
            bidirectional: true,
            flip: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sequence_length == 0 || self.batch_size == 0 {
            return Err(Error::InvalidValue(
                "sequence_length and batch_size must be positive".into(),
            ));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::InvalidValue(format!(
                "lr_decay must lie in (0, 1], got {}",
                self.lr_decay
            )));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidValue("learning_rate must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::InvalidValue("Adam betas must lie in [0, 1)".into()));
        }
        Ok(())
    }

    /// Learning rate used throughout epoch `epoch` (0-based).
    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        self.learning_rate * self.lr_decay.powi(epoch as i32)
    }

    pub fn dims(&self, joints: usize) -> ModelDims {
        ModelDims {
            joints,
            c: self.c,
            c_prime: self.c_prime,
            bidirectional: self.bidirectional,
        }
    }
}

/// Adam with bias correction over an ordered list of tensors.
#[derive(Clone, Debug)]
pub struct Adam {
    first: Vec<DMatrix<f64>>,
    second: Vec<DMatrix<f64>>,
    steps: u64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
}

impl Adam {
    /// Moments shaped like `tensors`.
    pub fn new<'a>(
        tensors: impl IntoIterator<Item = &'a DMatrix<f64>>,
        beta1: f64,
        beta2: f64,
        epsilon: f64,
    ) -> Self {
        let first: Vec<DMatrix<f64>> = tensors
            .into_iter()
            .map(|t| DMatrix::zeros(t.nrows(), t.ncols()))
            .collect();
        Self {
            second: first.clone(),
            first,
            steps: 0,
            beta1,
            beta2,
            epsilon,
        }
    }

    pub fn for_model(params: &LengthModelParams, cfg: &TrainConfig) -> Self {
        Self::new(
            params.named_tensors().into_iter().map(|(_, t)| t),
            cfg.beta1,
            cfg.beta2,
            cfg.epsilon,
        )
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// One update; `params` and `grads` must follow the construction order.
    pub fn step<'a, 'b>(
        &mut self,
        params: impl IntoIterator<Item = &'a mut DMatrix<f64>>,
        grads: impl IntoIterator<Item = &'b DMatrix<f64>>,
        lr: f64,
    ) {
        self.steps += 1;
        let (b1, b2, eps) = (self.beta1, self.beta2, self.epsilon);
        let c1 = 1.0 - b1.powi(self.steps as i32);
        let c2 = 1.0 - b2.powi(self.steps as i32);
        for (((p, g), m), v) in params
            .into_iter()
            .zip(grads)
            .zip(&mut self.first)
            .zip(&mut self.second)
        {
            for i in 0..p.len() {
                let gi = g[i];
                m[i] = b1 * m[i] + (1.0 - b1) * gi;
                v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
            }
        }
    }

    pub fn step_model(&mut self, params: &mut LengthModelParams, grads: &LengthModelParams, lr: f64) {
        self.step(
            params.tensors_mut(),
            grads.named_tensors().into_iter().map(|(_, t)| t),
            lr,
        );
    }
}

/// One training or validation sequence. `poses` (camera-space, meters) is
/// required when augmentation regenerates keypoints; `keypoints` are pixels.
#[derive(Clone, Debug)]
pub struct TrainExample {
    pub poses: Option<PoseSequence>,
    pub keypoints: KeypointSequence,
    pub lengths: BoneLengths,
}

/// Where augmented target lengths come from.
#[derive(Clone, Debug)]
pub enum LengthGenerator {
    /// Uniform perturbation around each sample, scaled by the batch mean.
    Uniform,
    /// Normal perturbation with these per-bone standard deviations.
    Normal { sigmas: Vec<f64> },
    /// Rows of a (mean-aligned) length bank.
    Synthetic { bank: LengthBank },
}

#[derive(Clone, Debug)]
pub struct Augmentation {
    pub config: AugmentationConfig,
    pub generator: LengthGenerator,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub learning_rate: f64,
    pub train_loss: f64,
    pub valid_loss: Option<f64>,
    pub batches: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: LengthModelParams,
    pub log: TrainLog,
}

/// Shared inputs of a training run.
pub struct TrainContext<'a> {
    pub topo: &'a SkeletonTopology,
    pub cam: &'a CameraIntrinsics,
    pub augmentation: Option<&'a Augmentation>,
}

struct Segment {
    example: usize,
    start: usize,
}

/// Trains a fresh model initialized from `cfg.seed`.
pub fn train(
    train_set: &[TrainExample],
    valid_set: &[TrainExample],
    ctx: &TrainContext<'_>,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let dims = cfg.dims(ctx.topo.joint_count());
    let params = LengthModelParams::init(dims, &mut rng::stream(cfg.seed, 0))?;
    train_from(params, train_set, valid_set, ctx, cfg)
}

/// Trains starting from `params`.
///
/// Iteration order is fixed by the seed: segments are shuffled once per
/// epoch with a dedicated stream and batches are reduced in order, so a run
/// is bit-reproducible.
pub fn train_from(
    mut params: LengthModelParams,
    train_set: &[TrainExample],
    valid_set: &[TrainExample],
    ctx: &TrainContext<'_>,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if let Some(aug) = ctx.augmentation {
        aug.config.validate()?;
    }
    let n = cfg.sequence_length;
    let mut segments = Vec::new();
    for (i, ex) in train_set.iter().enumerate() {
        if ctx.augmentation.is_some() && ex.poses.is_none() {
            return Err(Error::InvalidValue(format!(
                "training example {i} has no 3D poses to augment"
            )));
        }
        let frames = ex.keypoints.len();
        segments.extend((0..frames / n).map(|k| Segment {
            example: i,
            start: k * n,
        }));
    }
    if segments.is_empty() {
        return Err(Error::InvalidValue(format!(
            "no training sequence has at least {n} frames"
        )));
    }

    let mut order_rng = rng::stream(cfg.seed, 1);
    let mut aug_rng = rng::stream(
        ctx.augmentation.map_or(cfg.seed, |a| a.config.seed),
        2,
    );
    let mut adam = Adam::for_model(&params, cfg);
    let mut log = TrainLog::default();

    for epoch in 0..cfg.epochs {
        let lr = cfg.learning_rate_at(epoch);
        segments.shuffle(&mut order_rng);
        let mut loss_sum = 0.0;
        let mut samples = 0usize;
        let mut batches = 0usize;
        for (b, chunk) in segments.chunks(cfg.batch_size).enumerate() {
            let (frames, targets) = build_batch(chunk, train_set, ctx, cfg, &mut aug_rng)?;
            let (loss, grads) = loss_and_gradients(&params, &frames, &targets)?;
            if !loss.is_finite() || !grads.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: b });
            }
            adam.step_model(&mut params, &grads, lr);
            loss_sum += loss * targets.ncols() as f64;
            samples += targets.ncols();
            batches += 1;
        }
        let valid_loss = if valid_set.is_empty() {
            None
        } else {
            Some(evaluate_loss(&params, valid_set, ctx, cfg.flip)?)
        };
        log.epochs.push(EpochLog {
            epoch,
            learning_rate: lr,
            train_loss: loss_sum / samples as f64,
            valid_loss,
            batches,
        });
    }
    Ok(TrainOutcome { params, log })
}

fn slice_poses(poses: &PoseSequence, start: usize, len: usize) -> PoseSequence {
    PoseSequence {
        frames: poses.frames[start..start + len].to_vec(),
        fps: poses.fps,
        meta: poses.meta.clone(),
    }
}

fn slice_keypoints(kps: &KeypointSequence, start: usize, len: usize) -> KeypointSequence {
    KeypointSequence {
        frames: kps.frames[start..start + len].to_vec(),
        confidence: kps
            .confidence
            .as_ref()
            .map(|c| c[start..start + len].to_vec()),
        meta: kps.meta.clone(),
    }
}

fn batch_mean(chunk: &[Segment], set: &[TrainExample]) -> BoneLengths {
    let bones = set[chunk[0].example].lengths.len();
    let mut mean = vec![0.0; bones];
    for seg in chunk {
        for (m, l) in mean.iter_mut().zip(set[seg.example].lengths.as_slice()) {
            *m += l;
        }
    }
    mean.iter_mut().for_each(|m| *m /= chunk.len() as f64);
    BoneLengths::from_raw(mean)
}

fn build_batch(
    chunk: &[Segment],
    set: &[TrainExample],
    ctx: &TrainContext<'_>,
    cfg: &TrainConfig,
    rng: &mut impl Rng,
) -> Result<(Vec<DMatrix<f64>>, DMatrix<f64>)> {
    let n = cfg.sequence_length;
    let mean = batch_mean(chunk, set);
    let mut samples: Vec<(KeypointSequence, BoneLengths)> = Vec::with_capacity(2 * chunk.len());
    for seg in chunk {
        let ex = &set[seg.example];
        let (kps, lengths) = match ctx.augmentation {
            Some(aug) => {
                let cfg_aug = &aug.config;
                let lengths = match &aug.generator {
                    LengthGenerator::Uniform => {
                        gen_lengths_uniform(&ex.lengths, &mean, cfg_aug, ctx.topo, rng)?
                    }
                    LengthGenerator::Normal { sigmas } => {
                        gen_lengths_normal(&ex.lengths, sigmas, cfg_aug, ctx.topo, rng)?
                    }
                    LengthGenerator::Synthetic { bank } => {
                        gen_lengths_synthetic(bank, cfg_aug, ctx.topo, rng)?
                    }
                };
                let poses = slice_poses(ex.poses.as_ref().expect("checked"), seg.start, n);
                let sample = augment_sequence(&poses, &lengths, cfg_aug, ctx.cam, ctx.topo, rng)?;
                (sample.keypoints, lengths)
            }
            None => (slice_keypoints(&ex.keypoints, seg.start, n), ex.lengths.clone()),
        };
        if cfg.flip {
            let flipped = flip_keypoints(&kps, ctx.cam, ctx.topo);
            let mirrored = mirror_lengths(&lengths, ctx.topo);
            samples.push((kps, lengths));
            samples.push((flipped, mirrored));
        } else {
            samples.push((kps, lengths));
        }
    }

    let width = samples.len();
    let joints = ctx.topo.joint_count();
    let inputs: Vec<Vec<Vec<f64>>> = samples
        .iter()
        .map(|(k, _)| normalize_keypoints(k, ctx.cam).flattened())
        .collect();
    let frames = (0..n)
        .map(|t| DMatrix::from_fn(2 * joints, width, |r, c| inputs[c][t][r]))
        .collect();
    let targets = DMatrix::from_fn(joints - 1, width, |r, c| samples[c].1.as_slice()[r]);
    Ok((frames, targets))
}

/// Mean per-sequence length loss over full (unsliced) sequences.
pub fn evaluate_loss(
    params: &LengthModelParams,
    set: &[TrainExample],
    ctx: &TrainContext<'_>,
    flip: bool,
) -> Result<f64> {
    let mut total = 0.0;
    for ex in set {
        let pred = predict_sequence(params, &ex.keypoints, ctx.cam, ctx.topo, flip)?;
        total += length_loss(&pred, &ex.lengths)?;
    }
    Ok(total / set.len() as f64)
}
