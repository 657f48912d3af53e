//! Training-time augmentation: new bone lengths for existing motion.
//!
//! A source pose keeps its bone directions, receives a freshly generated
//! length vector, is shifted by one random offset per sequence and projected
//! back to 2D. The model learns to recover the generated lengths from those
//! keypoints.
//!
//! Three length generators are provided:
//!
//! * **uniform**: `l'_i = l_i + r_i * mean_i` with `r_i ~ U(-r_max, r_max)`,
//!   `mean` being the batch-average length of each bone;
//! * **normal**: `l'_i ~ N(l_i, sigma_i)` with per-bone standard deviations;
//! * **synthetic**: rows of a [`LengthBank`] built from body meshes and
//!   shifted so its per-bone mean matches the training data.
//!
//! All generators reject non-positive draws and resample instead of
//! clamping. With symmetry enforced, left/right bones come out identical.

use std::path::Path;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::camera::{project_sequence, CameraIntrinsics, KeypointSequence, Vec2};
use crate::error::{Error, Result};
use crate::skeleton::{
    decompose_pose, replace_lengths, BoneLengths, PoseSequence, SkeletonTopology, Vec3,
};

/// Resampling budget before a generator gives up.
pub const MAX_RESAMPLES: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Uniform,
    Normal,
    Synthetic,
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(Strategy::Uniform),
            "normal" => Ok(Strategy::Normal),
            "synthetic" => Ok(Strategy::Synthetic),
            other => Err(Error::InvalidValue(format!(
                "unknown strategy {other:?} (expected uniform, normal or synthetic)"
            ))),
        }
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Strategy::Uniform => "uniform",
            Strategy::Normal => "normal",
            Strategy::Synthetic => "synthetic",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentationConfig {
    pub strategy: Strategy,
    /// Half-width of the relative uniform perturbation.
    pub uniform_range: f64,
    /// Per-axis standard deviation of the sequence shift, meters.
    pub shift_sigma: f64,
    pub enforce_symmetry: bool,
    pub seed: u64,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Synthetic,
            uniform_range: 0.3,
            shift_sigma: 0.5,
            enforce_symmetry: true,
            seed: 0,
        }
    }
}

impl AugmentationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.uniform_range > 0.0 && self.uniform_range < 1.0) {
            return Err(Error::InvalidValue(format!(
                "uniform_range must lie in (0, 1), got {}",
                self.uniform_range
            )));
        }
        if !(self.shift_sigma >= 0.0 && self.shift_sigma.is_finite()) {
            return Err(Error::InvalidValue(format!(
                "shift_sigma must be non-negative, got {}",
                self.shift_sigma
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BankSource {
    SyntheticMesh,
    Dataset,
}

impl BankSource {
    pub fn as_str(&self) -> &'static str {
        match self {
            BankSource::SyntheticMesh => "synthetic-mesh",
            BankSource::Dataset => "dataset",
        }
    }
}

/// Sampled collection of per-bone length vectors with cached statistics.
///
/// Standard deviations are population statistics (divide by `S`).
#[derive(Clone, Debug, PartialEq)]
pub struct LengthBank {
    samples: Vec<Vec<f64>>,
    source: BankSource,
    mean: Vec<f64>,
    std: Vec<f64>,
}

impl LengthBank {
    pub fn new(samples: Vec<Vec<f64>>, source: BankSource) -> Result<Self> {
        let Some(first) = samples.first() else {
            return Err(Error::InvalidValue("a length bank needs at least one sample".into()));
        };
        let bones = first.len();
        for (s, row) in samples.iter().enumerate() {
            if row.len() != bones {
                return Err(Error::dims("length bank row", bones, row.len()));
            }
            if let Some(b) = row.iter().position(|l| !(l.is_finite() && *l > 0.0)) {
                return Err(Error::InvalidValue(format!(
                    "bank sample {s}, bone {}: length {} is not positive",
                    b + 1,
                    row[b]
                )));
            }
        }
        let (mean, std) = column_stats(&samples);
        Ok(Self {
            samples,
            source,
            mean,
            std,
        })
    }

    pub fn samples(&self) -> &[Vec<f64>] {
        &self.samples
    }

    pub fn source(&self) -> BankSource {
        self.source
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn std(&self) -> &[f64] {
        &self.std
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn bone_count(&self) -> usize {
        self.mean.len()
    }

    pub fn mean_lengths(&self) -> BoneLengths {
        BoneLengths::from_raw(self.mean.clone())
    }

    /// One row chosen uniformly at random.
    pub fn sample(&self, rng: &mut impl Rng) -> BoneLengths {
        let row = rng.random_range(0..self.samples.len());
        BoneLengths::from_raw(self.samples[row].clone())
    }

    /// Writes the bank as CSV: an optional `# source=` comment, a header of
    /// bone names, then one sample per row in meters.
    pub fn to_csv_string(&self, topo: &SkeletonTopology) -> Result<String> {
        if topo.bone_count() != self.bone_count() {
            return Err(Error::dims("length bank bones", topo.bone_count(), self.bone_count()));
        }
        let mut writer = csv::Writer::from_writer(Vec::new());
        let csv_err = |e: csv::Error| Error::InvalidValue(e.to_string());
        writer.write_record(topo.bone_names()).map_err(csv_err)?;
        for row in &self.samples {
            writer
                .write_record(row.iter().map(|v| format!("{v}")))
                .map_err(csv_err)?;
        }
        let body = writer
            .into_inner()
            .map_err(|e| Error::InvalidValue(e.to_string()))?;
        Ok(format!(
            "# source={}\n{}",
            self.source.as_str(),
            String::from_utf8(body).expect("csv output is utf-8")
        ))
    }

    pub fn save_csv(&self, path: impl AsRef<Path>, topo: &SkeletonTopology) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv_string(topo)?).map_err(|e| Error::io(path, e))
    }

    pub fn load_csv(path: impl AsRef<Path>, topo: &SkeletonTopology) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_csv(&text, topo).map_err(|e| Error::schema(path, e.to_string()))
    }

    pub fn parse_csv(text: &str, topo: &SkeletonTopology) -> Result<Self> {
        let mut source = BankSource::Dataset;
        let mut body = text;
        if let Some(rest) = text.strip_prefix("# source=") {
            let (tag, remainder) = rest.split_once('\n').unwrap_or((rest, ""));
            source = match tag.trim() {
                "synthetic-mesh" => BankSource::SyntheticMesh,
                "dataset" => BankSource::Dataset,
                other => return Err(Error::InvalidValue(format!("unknown bank source {other:?}"))),
            };
            body = remainder;
        }
        let mut reader = csv::Reader::from_reader(body.as_bytes());
        let header = reader
            .headers()
            .map_err(|e| Error::InvalidValue(e.to_string()))?;
        let names: Vec<&str> = header.iter().collect();
        if names != topo.bone_names().iter().map(String::as_str).collect::<Vec<_>>() {
            return Err(Error::InvalidValue(
                "CSV header does not match the topology's bone names".into(),
            ));
        }
        let mut samples = Vec::new();
        for record in reader.records() {
            let record = record.map_err(|e| Error::InvalidValue(e.to_string()))?;
            let row = record
                .iter()
                .map(|v| {
                    v.trim()
                        .parse::<f64>()
                        .map_err(|e| Error::InvalidValue(format!("{v:?}: {e}")))
                })
                .collect::<Result<Vec<_>>>()?;
            samples.push(row);
        }
        Self::new(samples, source)
    }
}

fn column_stats(samples: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let n = samples.len() as f64;
    let bones = samples[0].len();
    let mut mean = vec![0.0; bones];
    for row in samples {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; bones];
    for row in samples {
        for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    let std = var.into_iter().map(|s| (s / n).sqrt()).collect();
    (mean, std)
}

fn partner_of(topo: &SkeletonTopology) -> Vec<Option<usize>> {
    let mut partner = vec![None; topo.bone_count()];
    for &(a, b) in topo.symmetry_pairs() {
        partner[a - 1] = Some(b - 1);
        partner[b - 1] = Some(a - 1);
    }
    partner
}

fn check_bones(context: &'static str, topo: &SkeletonTopology, len: usize) -> Result<()> {
    if len != topo.bone_count() {
        return Err(Error::dims(context, topo.bone_count(), len));
    }
    Ok(())
}

/// Uniform relative perturbation around `base`, scaled by the batch mean.
pub fn gen_lengths_uniform(
    base: &BoneLengths,
    batch_mean: &BoneLengths,
    cfg: &AugmentationConfig,
    topo: &SkeletonTopology,
    rng: &mut impl Rng,
) -> Result<BoneLengths> {
    let r_max = cfg.uniform_range;
    perturb_uniform(base, batch_mean, cfg, topo, || rng.random_range(-r_max..=r_max))
}

pub(crate) fn perturb_uniform(
    base: &BoneLengths,
    batch_mean: &BoneLengths,
    cfg: &AugmentationConfig,
    topo: &SkeletonTopology,
    mut draw: impl FnMut() -> f64,
) -> Result<BoneLengths> {
    check_bones("base lengths", topo, base.len())?;
    check_bones("batch mean lengths", topo, batch_mean.len())?;
    if let Some(i) = batch_mean.as_slice().iter().position(|m| !(*m > 0.0)) {
        return Err(Error::InvalidValue(format!(
            "batch mean of bone {} must be positive",
            i + 1
        )));
    }
    let base = base.as_slice();
    let mean = batch_mean.as_slice();
    let partner = partner_of(topo);
    let mut out = vec![0.0; base.len()];
    for i in 0..base.len() {
        let paired = cfg.enforce_symmetry.then_some(partner[i]).flatten();
        if let Some(j) = paired.filter(|&j| j < i) {
            out[i] = out[j];
            continue;
        }
        let mut attempts = 0;
        loop {
            let r = draw();
            let li = base[i] + r * mean[i];
            // The partner shares r and must come out positive as well.
            let lj = paired.map(|j| base[j] + r * mean[j]);
            if li > 0.0 && lj.is_none_or(|l| l > 0.0) {
                out[i] = li;
                break;
            }
            attempts += 1;
            if attempts >= MAX_RESAMPLES {
                return Err(Error::NonPositiveResult { bone: i + 1 });
            }
        }
    }
    Ok(BoneLengths::from_raw(out))
}

/// Per-bone normal perturbation `l'_i ~ N(l_i, sigma_i)`.
pub fn gen_lengths_normal(
    base: &BoneLengths,
    sigmas: &[f64],
    cfg: &AugmentationConfig,
    topo: &SkeletonTopology,
    rng: &mut impl Rng,
) -> Result<BoneLengths> {
    perturb_normal(base, sigmas, cfg, topo, || StandardNormal.sample(rng))
}

pub(crate) fn perturb_normal(
    base: &BoneLengths,
    sigmas: &[f64],
    cfg: &AugmentationConfig,
    topo: &SkeletonTopology,
    mut draw: impl FnMut() -> f64,
) -> Result<BoneLengths> {
    check_bones("base lengths", topo, base.len())?;
    check_bones("sigmas", topo, sigmas.len())?;
    if let Some(i) = sigmas.iter().position(|s| !(*s >= 0.0 && s.is_finite())) {
        return Err(Error::InvalidValue(format!(
            "sigma of bone {} must be non-negative",
            i + 1
        )));
    }
    let base = base.as_slice();
    let partner = partner_of(topo);
    let mut out = vec![0.0; base.len()];
    for i in 0..base.len() {
        if let Some(j) = cfg.enforce_symmetry.then_some(partner[i]).flatten().filter(|&j| j < i) {
            out[i] = out[j];
            continue;
        }
        let mut attempts = 0;
        loop {
            let li = base[i] + sigmas[i] * draw();
            if li > 0.0 {
                out[i] = li;
                break;
            }
            attempts += 1;
            if attempts >= MAX_RESAMPLES {
                return Err(Error::NonPositiveResult { bone: i + 1 });
            }
        }
    }
    Ok(BoneLengths::from_raw(out))
}

/// A row of the bank; with symmetry enforced, each left/right pair is
/// replaced by its average.
pub fn gen_lengths_synthetic(
    bank: &LengthBank,
    cfg: &AugmentationConfig,
    topo: &SkeletonTopology,
    rng: &mut impl Rng,
) -> Result<BoneLengths> {
    check_bones("bank", topo, bank.bone_count())?;
    let mut out = bank.sample(rng).into_vec();
    if cfg.enforce_symmetry {
        for &(a, b) in topo.symmetry_pairs() {
            let avg = 0.5 * (out[a - 1] + out[b - 1]);
            out[a - 1] = avg;
            out[b - 1] = avg;
        }
    }
    Ok(BoneLengths::from_raw(out))
}

/// Regresses joints from mesh vertices (`joints = regressor * mesh`) and
/// measures the bones between them.
pub fn regress_joints_from_mesh(
    mesh: &[Vec3],
    regressor: &DMatrix<f64>,
    topo: &SkeletonTopology,
) -> Result<BoneLengths> {
    let joints = regress_joints(mesh, regressor, topo)?;
    let pose = crate::skeleton::Pose::new(joints)?;
    Ok(decompose_pose(&pose, topo)?.0)
}

pub fn regress_joints(
    mesh: &[Vec3],
    regressor: &DMatrix<f64>,
    topo: &SkeletonTopology,
) -> Result<Vec<Vec3>> {
    if regressor.nrows() != topo.joint_count() {
        return Err(Error::dims("regressor rows", topo.joint_count(), regressor.nrows()));
    }
    if regressor.ncols() != mesh.len() {
        return Err(Error::dims("regressor columns", mesh.len(), regressor.ncols()));
    }
    for (j, row) in regressor.row_iter().enumerate() {
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidValue(format!(
                "regressor row {j} sums to {sum}, expected 1"
            )));
        }
    }
    let verts = DMatrix::from_fn(mesh.len(), 3, |v, c| mesh[v][c]);
    let joints = regressor * verts;
    Ok((0..joints.nrows())
        .map(|j| Vec3::new(joints[(j, 0)], joints[(j, 1)], joints[(j, 2)]))
        .collect())
}

/// How [`align_bank_mean_with`] moves a bank onto a target mean.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AlignMode {
    /// Add `target_i - mean_i` to every sample; variance is preserved.
    Additive,
    /// Scale by `target_i / mean_i`; relative spread is preserved.
    Multiplicative,
}

/// Shifts every sample so the per-bone means equal `target_mean`.
pub fn align_bank_mean(bank: &LengthBank, target_mean: &BoneLengths) -> Result<LengthBank> {
    align_bank_mean_with(bank, target_mean, AlignMode::Additive)
}

pub fn align_bank_mean_with(
    bank: &LengthBank,
    target_mean: &BoneLengths,
    mode: AlignMode,
) -> Result<LengthBank> {
    if target_mean.len() != bank.bone_count() {
        return Err(Error::dims("target mean", bank.bone_count(), target_mean.len()));
    }
    let target = target_mean.as_slice();
    let samples: Vec<Vec<f64>> = bank
        .samples
        .iter()
        .map(|row| {
            row.iter()
                .zip(target.iter().zip(&bank.mean))
                .map(|(v, (t, m))| match mode {
                    AlignMode::Additive => v + (t - m),
                    AlignMode::Multiplicative => v * (t / m),
                })
                .collect()
        })
        .collect();
    for row in &samples {
        if let Some(b) = row.iter().position(|l| !(*l > 0.0)) {
            return Err(Error::NonPositiveResult { bone: b + 1 });
        }
    }
    LengthBank::new(samples, bank.source)
}

/// One augmented training pair along with the intermediate 3D poses.
#[derive(Clone, Debug)]
pub struct AugmentedSample {
    pub keypoints: KeypointSequence,
    pub lengths: BoneLengths,
    /// Length-replaced and shifted poses, before projection.
    pub poses: PoseSequence,
    pub shift: Vec3,
}

/// Gives every frame `lengths`, shifts the whole sequence by one offset
/// `s ~ N(0, shift_sigma^2 I)` and projects it. Draws that push a joint
/// behind the camera are retried.
pub fn augment_sequence(
    poses: &PoseSequence,
    lengths: &BoneLengths,
    cfg: &AugmentationConfig,
    cam: &CameraIntrinsics,
    topo: &SkeletonTopology,
    rng: &mut impl Rng,
) -> Result<AugmentedSample> {
    let replaced = replace_sequence_lengths(poses, lengths, topo)?;
    let mut attempts = 0;
    loop {
        let shift = Vec3::from_fn(|_, _| {
            let z: f64 = StandardNormal.sample(rng);
            z * cfg.shift_sigma
        });
        match shift_and_project(&replaced, shift, cam) {
            Ok((keypoints, poses)) => {
                return Ok(AugmentedSample {
                    keypoints,
                    lengths: lengths.clone(),
                    poses,
                    shift,
                })
            }
            Err(err @ Error::BehindCamera { .. }) => {
                attempts += 1;
                if attempts >= MAX_RESAMPLES {
                    return Err(err);
                }
            }
            Err(other) => return Err(other),
        }
    }
}

pub(crate) fn replace_sequence_lengths(
    poses: &PoseSequence,
    lengths: &BoneLengths,
    topo: &SkeletonTopology,
) -> Result<PoseSequence> {
    lengths.validate()?;
    let frames = poses
        .frames
        .iter()
        .enumerate()
        .map(|(f, pose)| {
            replace_lengths(pose, lengths, topo).map_err(|e| match e {
                Error::DegenerateBone { bone, .. } => Error::DegenerateBone {
                    bone,
                    frame: Some(f),
                },
                other => other,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PoseSequence {
        frames,
        fps: poses.fps,
        meta: poses.meta.clone(),
    })
}

fn shift_and_project(
    poses: &PoseSequence,
    shift: Vec3,
    cam: &CameraIntrinsics,
) -> Result<(KeypointSequence, PoseSequence)> {
    let shifted = PoseSequence {
        frames: poses.frames.iter().map(|p| p.translated(&shift)).collect(),
        fps: poses.fps,
        meta: poses.meta.clone(),
    };
    Ok((project_sequence(&shifted, cam)?, shifted))
}

/// Mirrors keypoints about the vertical line through the principal point and
/// exchanges left/right joints.
pub fn flip_keypoints(
    kps: &KeypointSequence,
    cam: &CameraIntrinsics,
    topo: &SkeletonTopology,
) -> KeypointSequence {
    let perm = topo.mirrored_joints();
    let frames = kps
        .frames
        .iter()
        .map(|frame| {
            perm.iter()
                .map(|&src| Vec2::new(2.0 * cam.cx - frame[src].x, frame[src].y))
                .collect()
        })
        .collect();
    let confidence = kps.confidence.as_ref().map(|conf| {
        conf.iter()
            .map(|row| perm.iter().map(|&src| row[src]).collect())
            .collect()
    });
    KeypointSequence {
        frames,
        confidence,
        meta: kps.meta.clone(),
    }
}

/// Exchanges the lengths of left/right bones, matching [`flip_keypoints`].
pub fn mirror_lengths(lengths: &BoneLengths, topo: &SkeletonTopology) -> BoneLengths {
    let src = lengths.as_slice();
    BoneLengths::from_raw(topo.mirrored_bone_slots().iter().map(|&i| src[i]).collect())
}
