//! Procedural stand-in for a motion-capture dataset: bodies from a small
//! statistical shape model, body meshes with a joint regressor, and smooth
//! random motion seen by a fixed camera.

use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, Rotation3};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::augment::{regress_joints_from_mesh, BankSource, LengthBank};
use crate::camera::{project_sequence, CameraIntrinsics, Vec2};
use crate::error::{Error, Result};
use crate::io::{SequenceRecord, SequenceSet};
use crate::rng;
use crate::skeleton::{
    decompose_pose, reconstruct_pose, BoneDirections, BoneLengths, Pose, PoseSequence,
    SequenceMeta, SkeletonTopology, Vec3,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub train_sequences: usize,
    pub test_sequences: usize,
    pub frames: usize,
    pub fps: f64,
    /// Largest per-frame rotation of any bone or of the body, radians.
    pub angular_step: f64,
    /// Scales how far each bone's resting rotation sits from the rest pose.
    pub pose_spread: f64,
    /// Bodies start facing the camera up to this yaw either way, radians.
    /// At `pi` the body keeps turning; below it the yaw reverts to its start.
    pub facing_range: f64,
    /// Standard deviation of Gaussian keypoint noise, pixels.
    pub noise_sigma: f64,
    /// Mean root depth, meters.
    pub depth: f64,
    /// Half-range of the uniform root depth offset, meters.
    pub depth_jitter: f64,
    /// Half-range of the uniform lateral root offset, meters.
    pub lateral: f64,
    /// Samples in the mesh-derived length bank.
    pub bank_size: usize,
    pub body: BodyModel,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            train_sequences: 200,
            test_sequences: 40,
            frames: 600,
            fps: 50.0,
            angular_step: 0.05,
            pose_spread: 1.0,
            facing_range: std::f64::consts::PI,
            noise_sigma: 0.0,
            depth: 3.2,
            depth_jitter: 0.05,
            lateral: 0.3,
            bank_size: 2000,
            body: BodyModel::default(),
            seed: 0,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.train_sequences == 0 || self.frames == 0 {
            return Err(Error::InvalidValue(
                "corpus needs at least one training sequence and one frame".into(),
            ));
        }
        let non_negative = [
            ("angular_step", self.angular_step),
            ("pose_spread", self.pose_spread),
            ("facing_range", self.facing_range),
            ("noise_sigma", self.noise_sigma),
            ("depth_jitter", self.depth_jitter),
            ("lateral", self.lateral),
        ];
        for (name, v) in non_negative {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidValue(format!("{name} must be non-negative, got {v}")));
            }
        }
        if !(self.fps > 0.0) {
            return Err(Error::InvalidValue("fps must be positive".into()));
        }
        if !(self.depth - self.depth_jitter > 1.5) {
            return Err(Error::InvalidValue(
                "depth minus depth_jitter must exceed 1.5 m to keep bodies in front of the camera"
                    .into(),
            ));
        }
        if self.bank_size == 0 {
            return Err(Error::InvalidValue("bank_size must be positive".into()));
        }
        self.body.validate()
    }
}

/// Bone lengths as `mean * (1 + stature + group + own)`, each term a
/// zero-mean Gaussian factor, the group factor shared by bones of a limb or
/// the torso. Left and right bones are always equal.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BodyModel {
    /// Mean lengths in bone order, meters.
    pub mean: Vec<f64>,
    /// Group index of every bone.
    pub groups: Vec<usize>,
    pub stature_sigma: f64,
    pub group_sigma: f64,
    pub bone_sigma: f64,
}

impl Default for BodyModel {
    fn default() -> Self {
        Self {
            mean: vec![
                0.133, 0.454, 0.448, 0.133, 0.454, 0.448, 0.233, 0.257, 0.121, 0.115, 0.151,
                0.278, 0.252, 0.151, 0.278, 0.252,
            ],
            // hips, legs, torso, arms
            groups: vec![0, 1, 1, 0, 1, 1, 2, 2, 2, 2, 0, 3, 3, 0, 3, 3],
            // Stature dominates, as in real bodies; per-bone terms are small.
            stature_sigma: 0.06,
            group_sigma: 0.04,
            bone_sigma: 0.02,
        }
    }
}

impl BodyModel {
    pub fn validate(&self) -> Result<()> {
        if self.mean.len() != self.groups.len() || self.mean.is_empty() {
            return Err(Error::InvalidValue("body model mean and groups must align".into()));
        }
        if !self.mean.iter().all(|m| *m > 0.0 && m.is_finite()) {
            return Err(Error::InvalidValue("body model means must be positive".into()));
        }
        let sigmas = [self.stature_sigma, self.group_sigma, self.bone_sigma];
        if !sigmas.iter().all(|s| *s >= 0.0 && s.is_finite()) {
            return Err(Error::InvalidValue("body model sigmas must be non-negative".into()));
        }
        Ok(())
    }

    /// Draws one body. Factors are clamped to keep every length within
    /// `[0.5, 1.5]` of its mean.
    pub fn sample(&self, topo: &SkeletonTopology, rng: &mut impl Rng) -> Result<BoneLengths> {
        if self.mean.len() != topo.bone_count() {
            return Err(Error::dims("body model bones", topo.bone_count(), self.mean.len()));
        }
        let mut normal = || -> f64 { StandardNormal.sample(&mut *rng) };
        let stature = self.stature_sigma * normal();
        let group_count = self.groups.iter().max().map_or(0, |g| g + 1);
        let group: Vec<f64> = (0..group_count).map(|_| self.group_sigma * normal()).collect();
        let own: Vec<f64> = (0..self.mean.len()).map(|_| self.bone_sigma * normal()).collect();
        let mut lengths: Vec<f64> = self
            .mean
            .iter()
            .enumerate()
            .map(|(i, m)| m * (1.0 + stature + group[self.groups[i]] + own[i]).clamp(0.5, 1.5))
            .collect();
        for &(a, b) in topo.symmetry_pairs() {
            lengths[b - 1] = lengths[a - 1];
        }
        BoneLengths::new(lengths)
    }
}

/// Standing rest pose in camera axes (x right, y down, z away), facing the
/// camera.
fn rest_directions(topo: &SkeletonTopology) -> Result<Vec<Vec3>> {
    if topo.joint_count() != 17 {
        return Err(Error::InvalidTopology(
            "the procedural corpus is defined for the 17-joint skeleton".into(),
        ));
    }
    let down = Vec3::new(0.0, 1.0, 0.0);
    let up = -down;
    let right = Vec3::new(-1.0, 0.0, 0.0);
    let left = -right;
    Ok(vec![
        right, down, down, left, down, down, up, up, up, up, left, down, down, right, down, down,
    ])
}

fn rest_pose(lengths: &BoneLengths, topo: &SkeletonTopology) -> Result<Pose> {
    let dirs = BoneDirections::new(rest_directions(topo)?)?;
    reconstruct_pose(lengths, &dirs, Vec3::zeros(), topo)
}

/// Vertices per joint ring in [`body_mesh`].
pub const RING_VERTICES: usize = 8;

/// A coarse body surface: a ring of vertices around every joint of the rest
/// pose. Ring radii follow the adjacent bone lengths and ring centers sit a
/// little towards the parent, as a skinned surface would.
pub fn body_mesh(lengths: &BoneLengths, topo: &SkeletonTopology) -> Result<Vec<Vec3>> {
    let pose = rest_pose(lengths, topo)?;
    let joints = pose.joints();
    let mut mesh = Vec::with_capacity(joints.len() * RING_VERTICES);
    for (j, &p) in joints.iter().enumerate() {
        let (center, radius) = match topo.parent(j) {
            Some(parent) => {
                let bone = p - joints[parent];
                (p - bone * 0.04, 0.12 * bone.norm() + 0.02)
            }
            None => (p, 0.06),
        };
        for k in 0..RING_VERTICES {
            let a = std::f64::consts::TAU * k as f64 / RING_VERTICES as f64;
            mesh.push(center + Vec3::new(radius * a.cos(), 0.0, radius * a.sin()));
        }
    }
    Ok(mesh)
}

/// Joint regressor for [`body_mesh`]: each joint averages its own ring with
/// uneven weights, so regressed joints are biased like a learned regressor.
pub fn mesh_regressor(topo: &SkeletonTopology) -> DMatrix<f64> {
    let j = topo.joint_count();
    let mut reg = DMatrix::zeros(j, j * RING_VERTICES);
    let weights: Vec<f64> = (0..RING_VERTICES).map(|k| 1.0 + 0.5 * (k % 3) as f64).collect();
    let total: f64 = weights.iter().sum();
    for joint in 0..j {
        for (k, w) in weights.iter().enumerate() {
            reg[(joint, joint * RING_VERTICES + k)] = w / total;
        }
    }
    reg
}

/// A length bank from bodies drawn with `body`, measured through
/// [`body_mesh`] and [`mesh_regressor`]. Its mean is offset from the body
/// model's and is meant to be aligned before use.
pub fn mesh_length_bank(
    body: &BodyModel,
    size: usize,
    topo: &SkeletonTopology,
    rng: &mut impl Rng,
) -> Result<LengthBank> {
    let reg = mesh_regressor(topo);
    let samples = (0..size)
        .map(|_| {
            let lengths = body.sample(topo, rng)?;
            Ok(regress_joints_from_mesh(&body_mesh(&lengths, topo)?, &reg, topo)?.into_vec())
        })
        .collect::<Result<Vec<_>>>()?;
    LengthBank::new(samples, BankSource::SyntheticMesh)
}

/// Motion style of an action: how fast rotations revert to their anchors,
/// how much they wander and how far anchors sit from the rest pose.
#[derive(Clone, Copy, Debug)]
struct ActionStyle {
    name: &'static str,
    revert: f64,
    wander: f64,
    spread: f64,
}

const ACTIONS: [ActionStyle; 6] = [
    ActionStyle { name: "Walking", revert: 0.01, wander: 0.05, spread: 0.6 },
    ActionStyle { name: "Posing", revert: 0.02, wander: 0.03, spread: 1.0 },
    ActionStyle { name: "Waiting", revert: 0.03, wander: 0.02, spread: 0.5 },
    ActionStyle { name: "Greeting", revert: 0.01, wander: 0.04, spread: 0.9 },
    ActionStyle { name: "Directions", revert: 0.015, wander: 0.04, spread: 0.7 },
    ActionStyle { name: "Discussion", revert: 0.02, wander: 0.035, spread: 0.8 },
];

fn gaussian3(rng: &mut impl Rng) -> Vec3 {
    Vec3::from_fn(|_, _| StandardNormal.sample(&mut *rng))
}

fn step_rotation(
    current: &Rotation3<f64>,
    anchor: &Rotation3<f64>,
    style: &ActionStyle,
    max_step: f64,
    axis: Option<Vec3>,
    rng: &mut impl Rng,
) -> Rotation3<f64> {
    let pull = (anchor * current.inverse()).scaled_axis() * style.revert;
    let mut omega = pull + gaussian3(rng) * style.wander;
    if let Some(a) = axis {
        omega = a * a.dot(&omega);
    }
    let n = omega.norm();
    if n > max_step {
        omega *= max_step / n;
    }
    if max_step == 0.0 {
        return *current;
    }
    Rotation3::new(omega) * current
}

/// Random smooth motion for one body. Every bone direction is its rest
/// direction under a per-bone rotation followed by a body yaw; all
/// rotations follow mean-reverting random walks with bounded steps.
pub fn synthesize_motion(
    lengths: &BoneLengths,
    frames: usize,
    root: Vec3,
    action: usize,
    cfg: &CorpusConfig,
    topo: &SkeletonTopology,
    rng: &mut impl Rng,
) -> Result<Vec<Pose>> {
    let max_step = cfg.angular_step;
    let style = ACTIONS[action % ACTIONS.len()];
    let rest = rest_directions(topo)?;
    let bones = rest.len();
    // Hips and shoulders are rigid; keep their excursions small.
    let rigid: Vec<bool> = rest.iter().map(|d| d.x != 0.0).collect();
    let anchors: Vec<Rotation3<f64>> = (0..bones)
        .map(|b| {
            let scale = if rigid[b] { 0.15 } else { 1.0 } * style.spread * cfg.pose_spread;
            Rotation3::new(gaussian3(rng) * (0.5 * scale))
        })
        .collect();
    let mut current = anchors.clone();
    let turning = cfg.facing_range >= std::f64::consts::PI;
    let yaw0: f64 = if cfg.facing_range > 0.0 {
        rng.random_range(-cfg.facing_range..cfg.facing_range)
    } else {
        0.0
    };
    let yaw_anchor = Rotation3::new(Vec3::y() * yaw0);
    let mut yaw = yaw_anchor;
    // A turning body shows every bone from many sides.
    let body_style = ActionStyle {
        revert: if turning { 0.0 } else { 0.02 },
        wander: 0.01,
        ..style
    };
    let turn = rng.random_range(-1.0..=1.0) * 0.6 * max_step * f64::from(u8::from(turning));
    let mut out = Vec::with_capacity(frames);
    for f in 0..frames {
        if f > 0 {
            for b in 0..bones {
                current[b] = step_rotation(&current[b], &anchors[b], &style, max_step, None, rng);
            }
            yaw = Rotation3::new(Vec3::y() * turn)
                * step_rotation(&yaw, &yaw_anchor, &body_style, 0.4 * max_step, Some(Vec3::y()), rng);
        }
        let dirs: Vec<Vec3> = (0..bones)
            .map(|b| (yaw * current[b] * rest[b]).normalize())
            .collect();
        out.push(reconstruct_pose(
            lengths,
            &BoneDirections::new(dirs)?,
            root,
            topo,
        )?);
    }
    Ok(out)
}

fn round_f32(v: f64) -> f64 {
    v as f32 as f64
}

fn quantize_pose(p: &Pose) -> Result<Pose> {
    Pose::new(
        p.joints()
            .iter()
            .map(|j| j.map(round_f32))
            .collect(),
    )
}

/// In-memory corpus. Values are already rounded to `f32`, so writing and
/// reading back is lossless.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub config: CorpusConfig,
    pub train: SequenceSet,
    pub test: SequenceSet,
    /// The bodies the sequences were drawn from (train rows first).
    pub population: LengthBank,
    /// Mesh-derived bank, not yet mean-aligned.
    pub mesh_bank: LengthBank,
}

/// Generates the corpus. Sequence `i` uses population row `i`; every
/// sequence's motion and noise come from their own random stream.
pub fn synthesize_corpus(
    cfg: &CorpusConfig,
    topo: &SkeletonTopology,
    cam: &CameraIntrinsics,
) -> Result<Corpus> {
    cfg.validate()?;
    cam.validate()?;
    let total = cfg.train_sequences + cfg.test_sequences;
    let mut body_rng = rng::stream(cfg.seed, 10);
    let bodies = (0..total)
        .map(|_| {
            cfg.body
                .sample(topo, &mut body_rng)
                .map(|l| l.into_vec().into_iter().map(round_f32).collect())
        })
        .collect::<Result<Vec<Vec<f64>>>>()?;
    let population = LengthBank::new(bodies, BankSource::Dataset)?;
    let mesh_bank = mesh_length_bank(&cfg.body, cfg.bank_size, topo, &mut rng::stream(cfg.seed, 11))?;

    let mut train = Vec::with_capacity(cfg.train_sequences);
    let mut test = Vec::with_capacity(cfg.test_sequences);
    for i in 0..total {
        let is_train = i < cfg.train_sequences;
        let mut rng = rng::stream(cfg.seed, 1000 + i as u64);
        let lengths = BoneLengths::new(population.samples()[i].clone())?;
        let action = i % ACTIONS.len();
        let root = Vec3::new(
            rng.random_range(-1.0..=1.0) * cfg.lateral,
            rng.random_range(-1.0..=1.0) * cfg.lateral * 0.5,
            cfg.depth + rng.random_range(-1.0..=1.0) * cfg.depth_jitter,
        );
        let frames = synthesize_motion(&lengths, cfg.frames, root, action, cfg, topo, &mut rng)?
            .iter()
            .map(quantize_pose)
            .collect::<Result<Vec<_>>>()?;
        let meta = SequenceMeta {
            id: format!("{}{:04}", if is_train { "train" } else { "test" }, i),
            subject: format!("S{i:04}"),
            action: ACTIONS[action].name.to_string(),
            camera: "cam0".into(),
        };
        let poses = PoseSequence::new(frames, cfg.fps, meta.clone())?;
        let mut kps = project_sequence(&poses, cam)?;
        for frame in &mut kps.frames {
            for p in frame.iter_mut() {
                let noise = if cfg.noise_sigma > 0.0 {
                    Vec2::new(
                        StandardNormal.sample(&mut rng),
                        StandardNormal.sample(&mut rng),
                    ) * cfg.noise_sigma
                } else {
                    Vec2::zeros()
                };
                *p = (*p + noise).map(round_f32);
            }
        }
        let record = SequenceRecord {
            meta,
            fps: cfg.fps,
            poses: Some(poses),
            keypoints: Some(kps),
            lengths: Some(lengths),
        };
        if is_train {
            train.push(record);
        } else {
            test.push(record);
        }
    }
    Ok(Corpus {
        config: cfg.clone(),
        train: SequenceSet::new(train),
        test: SequenceSet::new(test),
        population,
        mesh_bank,
    })
}

/// File names inside a corpus directory.
pub mod layout {
    pub const CONFIG: &str = "corpus.json";
    pub const TOPOLOGY: &str = "topology.json";
    pub const CAMERA: &str = "camera.json";
    pub const TRAIN: &str = "train.bundle";
    pub const TEST: &str = "test.bundle";
    pub const POPULATION: &str = "population.csv";
    pub const MESH_BANK: &str = "mesh_bank.csv";
}

/// A corpus together with the topology and camera stored next to it.
#[derive(Clone, Debug)]
pub struct CorpusDir {
    pub root: PathBuf,
    pub topology: SkeletonTopology,
    pub camera: CameraIntrinsics,
    pub corpus: Corpus,
}

fn write_text(path: PathBuf, text: &str) -> Result<()> {
    std::fs::write(&path, text).map_err(|e| Error::io(path, e))
}

impl Corpus {
    pub fn write(&self, dir: impl AsRef<Path>, topo: &SkeletonTopology, cam: &CameraIntrinsics) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let config = serde_json::to_string_pretty(&self.config).expect("config serializes");
        write_text(dir.join(layout::CONFIG), &config)?;
        write_text(dir.join(layout::TOPOLOGY), &topo.to_json_string())?;
        write_text(dir.join(layout::CAMERA), &cam.to_json_string())?;
        self.train.write(dir.join(layout::TRAIN), topo)?;
        self.test.write(dir.join(layout::TEST), topo)?;
        self.population.save_csv(dir.join(layout::POPULATION), topo)?;
        self.mesh_bank.save_csv(dir.join(layout::MESH_BANK), topo)
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<CorpusDir> {
        let dir = dir.as_ref();
        let config_path = dir.join(layout::CONFIG);
        let text = std::fs::read_to_string(&config_path).map_err(|e| Error::io(&config_path, e))?;
        let config: CorpusConfig =
            serde_json::from_str(&text).map_err(|e| Error::schema(&config_path, e.to_string()))?;
        let topology = SkeletonTopology::load(dir.join(layout::TOPOLOGY))?;
        let camera = CameraIntrinsics::load(dir.join(layout::CAMERA))?;
        let corpus = Corpus {
            config,
            train: SequenceSet::read(dir.join(layout::TRAIN), &topology)?,
            test: SequenceSet::read(dir.join(layout::TEST), &topology)?,
            population: LengthBank::load_csv(dir.join(layout::POPULATION), &topology)?,
            mesh_bank: LengthBank::load_csv(dir.join(layout::MESH_BANK), &topology)?,
        };
        Ok(CorpusDir {
            root: dir.to_path_buf(),
            topology,
            camera,
            corpus,
        })
    }

    /// Mean of the training sequences' bone lengths.
    pub fn train_mean_lengths(&self) -> Result<BoneLengths> {
        mean_lengths(&self.train)
    }
}

/// Per-bone mean of the stored lengths of a set.
pub fn mean_lengths(set: &SequenceSet) -> Result<BoneLengths> {
    let rows = set
        .records
        .iter()
        .map(|r| r.require_lengths().map(|l| l.as_slice().to_vec()))
        .collect::<Result<Vec<_>>>()?;
    Ok(LengthBank::new(rows, BankSource::Dataset)?.mean_lengths())
}

/// Checks that decomposing each stored pose reproduces the stored lengths.
pub fn max_length_inconsistency(set: &SequenceSet, topo: &SkeletonTopology) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for rec in &set.records {
        let lengths = rec.require_lengths()?;
        for pose in &rec.require_poses()?.frames {
            let (l, _) = decompose_pose(pose, topo)?;
            for (a, b) in l.as_slice().iter().zip(lengths.as_slice()) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    Ok(worst)
}
