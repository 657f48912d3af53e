//! A windowed affine 2D-to-3D lifter, small enough to fit in closed form and
//! to fine-tune with exact gradients through the length adjustment.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::camera::{CameraIntrinsics, KeypointSequence};
use crate::error::{Error, Result};
use crate::model::train::Adam;
use crate::model::{model_input, predict_sequence, LengthModelParams};
use crate::rng;
use crate::skeleton::{
    decompose_pose, BoneLengths, Pose, PoseSequence, SkeletonTopology, Vec3, DEGENERATE_BONE_EPS,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LifterConfig {
    /// Frames on each side of the current one fed to the map.
    pub half_window: usize,
    /// Ridge penalty per training frame.
    pub ridge: f64,
}

impl Default for LifterConfig {
    fn default() -> Self {
        Self {
            half_window: 1,
            ridge: 1e-6,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_frames: usize,
    pub seed: u64,
    /// Average mirrored length predictions, as at evaluation time.
    pub flip: bool,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            epochs: 3,
            learning_rate: 1e-5,
            batch_frames: 256,
            seed: 0,
            flip: true,
        }
    }
}

/// Maps a `(2w+1)`-frame window of normalized keypoints (edges replicated)
/// plus a constant 1 to the `J` root-relative joints of the center frame.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyLifter {
    half_window: usize,
    joints: usize,
    /// `3J x ((2w+1) * 2J + 1)`, bias in the last column.
    weights: DMatrix<f64>,
}

impl ToyLifter {
    pub fn new(weights: DMatrix<f64>, half_window: usize, joints: usize) -> Result<Self> {
        let expected = (3 * joints, (2 * half_window + 1) * 2 * joints + 1);
        if weights.shape() != expected {
            return Err(Error::dims("lifter weights", expected.0 * expected.1, weights.len()));
        }
        if !weights.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidValue("lifter weights must be finite".into()));
        }
        Ok(Self {
            half_window,
            joints,
            weights,
        })
    }

    pub fn zeros(joints: usize, half_window: usize) -> Self {
        let d = (2 * half_window + 1) * 2 * joints + 1;
        Self {
            half_window,
            joints,
            weights: DMatrix::zeros(3 * joints, d),
        }
    }

    pub fn half_window(&self) -> usize {
        self.half_window
    }

    pub fn joints(&self) -> usize {
        self.joints
    }

    pub fn weights(&self) -> &DMatrix<f64> {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut DMatrix<f64> {
        &mut self.weights
    }

    pub fn feature_dim(&self) -> usize {
        self.weights.ncols()
    }

    /// Feature column of frame `t` from flattened normalized frames.
    pub fn features_at(&self, frames: &[Vec<f64>], t: usize) -> DVector<f64> {
        let mut out = DVector::zeros(self.feature_dim());
        self.write_features(frames, t, out.as_mut_slice());
        out
    }

    fn write_features(&self, frames: &[Vec<f64>], t: usize, out: &mut [f64]) {
        let w = self.half_window as isize;
        let last = frames.len() as isize - 1;
        let width = 2 * self.joints;
        for (k, offset) in (-w..=w).enumerate() {
            let src = (t as isize + offset).clamp(0, last) as usize;
            out[k * width..(k + 1) * width].copy_from_slice(&frames[src]);
        }
        out[out.len() - 1] = 1.0;
    }

    /// Feature matrix (`d x T`) of a whole sequence.
    pub fn feature_matrix(&self, kps: &KeypointSequence, cam: &CameraIntrinsics) -> Result<DMatrix<f64>> {
        if kps.joint_count() != self.joints {
            return Err(Error::dims("keypoint joints", self.joints, kps.joint_count()));
        }
        let frames = model_input(kps, cam);
        let mut m = DMatrix::zeros(self.feature_dim(), frames.len());
        for t in 0..frames.len() {
            self.write_features(&frames, t, m.column_mut(t).as_mut_slice());
        }
        Ok(m)
    }

    /// Least-squares fit to root-relative truth poses.
    pub fn fit(
        data: &[(&KeypointSequence, &PoseSequence)],
        cam: &CameraIntrinsics,
        joints: usize,
        cfg: &LifterConfig,
    ) -> Result<Self> {
        let mut lifter = Self::zeros(joints, cfg.half_window);
        let d = lifter.feature_dim();
        let mut gram = DMatrix::zeros(d, d);
        let mut cross = DMatrix::zeros(d, 3 * joints);
        let mut frames = 0usize;
        for (kps, poses) in data {
            if kps.len() != poses.len() {
                return Err(Error::dims("lifter training frames", poses.len(), kps.len()));
            }
            let f = lifter.feature_matrix(kps, cam)?;
            let y = pose_matrix(poses, joints)?;
            gram += &f * f.transpose();
            cross += &f * y.transpose();
            frames += kps.len();
        }
        if frames == 0 {
            return Err(Error::InvalidValue("lifter needs training frames".into()));
        }
        for i in 0..d {
            gram[(i, i)] += cfg.ridge * frames as f64;
        }
        let chol = gram.cholesky().ok_or_else(|| {
            Error::DegenerateConfiguration("lifter normal equations are singular".into())
        })?;
        lifter.weights = chol.solve(&cross).transpose();
        Ok(lifter)
    }

    /// Root-relative 3D joints for every frame, in meters.
    pub fn predict(&self, kps: &KeypointSequence, cam: &CameraIntrinsics, fps: f64) -> Result<PoseSequence> {
        let out = &self.weights * self.feature_matrix(kps, cam)?;
        let frames = out
            .column_iter()
            .map(|c| Pose::new(column_joints(c.as_slice())))
            .collect::<Result<Vec<_>>>()?;
        PoseSequence::new(frames, fps, kps.meta.clone())
    }

    /// Pose for a single feature column.
    pub fn predict_frame(&self, features: &DVector<f64>) -> Result<Pose> {
        Pose::new(column_joints((&self.weights * features).as_slice()))
    }
}

fn column_joints(col: &[f64]) -> Vec<Vec3> {
    col.chunks_exact(3).map(|c| Vec3::new(c[0], c[1], c[2])).collect()
}

/// `3J x T` matrix of root-relative joints.
fn pose_matrix(poses: &PoseSequence, joints: usize) -> Result<DMatrix<f64>> {
    let mut y = DMatrix::zeros(3 * joints, poses.len());
    for (t, pose) in poses.frames.iter().enumerate() {
        if pose.len() != joints {
            return Err(Error::dims("pose joints", joints, pose.len()));
        }
        let root = pose.root();
        for (j, p) in pose.joints().iter().enumerate() {
            let rel = p - root;
            y.view_mut((3 * j, t), (3, 1)).copy_from_slice(rel.as_slice());
        }
    }
    Ok(y)
}

/// Truth for one fine-tuning frame.
#[derive(Clone, Debug)]
pub struct FinetuneTarget<'a> {
    pub truth: &'a Pose,
    /// Frozen length prediction used to adjust the lifter output.
    pub lengths: &'a BoneLengths,
}

/// Mean over columns of direction loss plus root-relative position error
/// (meters) of the length-adjusted lifter output, and its exact gradient
/// with respect to the lifter weights. The lengths are constants.
pub fn finetune_loss_and_gradient(
    lifter: &ToyLifter,
    features: &DMatrix<f64>,
    targets: &[FinetuneTarget<'_>],
    topo: &SkeletonTopology,
) -> Result<(f64, DMatrix<f64>)> {
    let batch = features.ncols();
    if targets.len() != batch || batch == 0 {
        return Err(Error::dims("fine-tuning targets", batch, targets.len()));
    }
    let joints = topo.joint_count();
    if lifter.joints != joints {
        return Err(Error::dims("lifter joints", joints, lifter.joints));
    }
    let bones = joints - 1;
    let out = &lifter.weights * features;
    let mut dout = DMatrix::zeros(3 * joints, batch);
    let mut total = 0.0;
    for (b, target) in targets.iter().enumerate() {
        let p = column_joints(out.column(b).as_slice());
        let (_, truth_dirs) = decompose_pose(target.truth, topo)?;
        let lengths = target.lengths.as_slice();
        let troot = target.truth.root();

        let mut dirs = Vec::with_capacity(bones);
        let mut norms = Vec::with_capacity(bones);
        for c in 1..joints {
            let v = p[c] - p[topo.parent(c).expect("non-root")];
            let n = v.norm();
            if !(n >= DEGENERATE_BONE_EPS) {
                return Err(Error::DegenerateBone { bone: c, frame: None });
            }
            dirs.push(v / n);
            norms.push(n);
        }
        let mut q = vec![Vec3::zeros(); joints];
        for c in 1..joints {
            q[c] = q[topo.parent(c).expect("non-root")] + dirs[c - 1] * lengths[c - 1];
        }

        // Position term and its gradient with respect to each adjusted joint.
        let mut acc = vec![Vec3::zeros(); joints];
        let mut loss_p = 0.0;
        for j in 0..joints {
            let diff = q[j] - (target.truth.joints()[j] - troot);
            let n = diff.norm();
            loss_p += n;
            if n > 0.0 {
                acc[j] = diff / (n * joints as f64);
            }
        }
        // Subtree sums: a bone moves every joint below it.
        for j in (1..joints).rev() {
            let parent = topo.parent(j).expect("non-root");
            let a = acc[j];
            acc[parent] += a;
        }
        let mut loss_d = 0.0;
        let mut dp = vec![Vec3::zeros(); joints];
        for c in 1..joints {
            let s = c - 1;
            let mut dd = acc[c] * lengths[s];
            let diff = dirs[s] - truth_dirs.as_slice()[s];
            let n = diff.norm();
            loss_d += n;
            if n > 0.0 {
                dd += diff / (n * bones as f64);
            }
            let d = dirs[s];
            let dv = (dd - d * d.dot(&dd)) / norms[s];
            dp[c] += dv;
            dp[topo.parent(c).expect("non-root")] -= dv;
        }
        total += loss_d / bones as f64 + loss_p / joints as f64;
        for (j, g) in dp.iter().enumerate() {
            dout.view_mut((3 * j, b), (3, 1)).copy_from_slice(g.as_slice());
        }
    }
    let scale = 1.0 / batch as f64;
    Ok((total * scale, dout * features.transpose() * scale))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FinetuneLog {
    /// Mean training loss per epoch.
    pub epoch_loss: Vec<f64>,
}

/// Fine-tunes the lifter weights on the adjusted-pose loss while the length
/// model stays fixed. `data` pairs pixel keypoints with truth poses.
pub fn finetune_toy_lifter(
    lifter: &ToyLifter,
    length_model: &LengthModelParams,
    data: &[(&KeypointSequence, &PoseSequence)],
    cam: &CameraIntrinsics,
    topo: &SkeletonTopology,
    cfg: &FinetuneConfig,
) -> Result<(ToyLifter, FinetuneLog)> {
    if cfg.batch_frames == 0 {
        return Err(Error::InvalidValue("batch_frames must be positive".into()));
    }
    let mut lifter = lifter.clone();
    let inputs: Vec<Vec<Vec<f64>>> = data.iter().map(|(k, _)| model_input(k, cam)).collect();
    let lengths = data
        .iter()
        .map(|(k, _)| predict_sequence(length_model, k, cam, topo, cfg.flip))
        .collect::<Result<Vec<_>>>()?;
    let mut order: Vec<(usize, usize)> = data
        .iter()
        .enumerate()
        .flat_map(|(s, (k, p))| {
            debug_assert_eq!(k.len(), p.len());
            (0..k.len().min(p.len())).map(move |t| (s, t))
        })
        .collect();
    if order.is_empty() {
        return Err(Error::InvalidValue("fine-tuning needs frames".into()));
    }
    let mut rng = rng::stream(cfg.seed, 3);
    let mut adam = Adam::new([&lifter.weights], 0.9, 0.999, 1e-8);
    let mut log = FinetuneLog::default();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for (b, chunk) in order.chunks(cfg.batch_frames).enumerate() {
            let mut features = DMatrix::zeros(lifter.feature_dim(), chunk.len());
            for (col, &(s, t)) in chunk.iter().enumerate() {
                lifter.write_features(&inputs[s], t, features.column_mut(col).as_mut_slice());
            }
            let targets: Vec<FinetuneTarget<'_>> = chunk
                .iter()
                .map(|&(s, t)| FinetuneTarget {
                    truth: &data[s].1.frames[t],
                    lengths: &lengths[s],
                })
                .collect();
            let (loss, grad) = finetune_loss_and_gradient(&lifter, &features, &targets, topo)?;
            if !loss.is_finite() || !grad.iter().all(|g| g.is_finite()) {
                return Err(Error::NonFiniteLoss { epoch, batch: b });
            }
            adam.step([&mut lifter.weights], [&grad], cfg.learning_rate);
            sum += loss * chunk.len() as f64;
        }
        log.epoch_loss.push(sum / order.len() as f64);
    }
    Ok((lifter, log))
}
