use nalgebra::Matrix3;

use crate::error::{Error, Result};
use crate::skeleton::{decompose_pose, BoneDirections, BoneLengths, Pose, SkeletonTopology, Vec3};

/// Centered prediction variance below this is treated as a single point.
pub const DEGENERATE_VARIANCE: f64 = 1e-18;

fn check_same_len(a: &Pose, b: &Pose) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::dims("pose joints", b.len(), a.len()));
    }
    Ok(())
}

fn mean_distance(pred: &[Vec3], truth: &[Vec3]) -> f64 {
    pred.iter().zip(truth).map(|(p, t)| (p - t).norm()).sum::<f64>() / pred.len() as f64
}

/// Mean per-joint position error in millimeters. Inputs are expected to be
/// root-relative already.
pub fn mpjpe(pred: &Pose, truth: &Pose) -> Result<f64> {
    check_same_len(pred, truth)?;
    Ok(1000.0 * mean_distance(pred.joints(), truth.joints()))
}

/// Similarity transform `x -> scale * rotation * x + translation`.
#[derive(Clone, Debug, PartialEq)]
pub struct Similarity {
    pub scale: f64,
    pub rotation: Matrix3<f64>,
    pub translation: Vec3,
}

impl Similarity {
    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.rotation * p * self.scale + self.translation
    }

    pub fn apply_pose(&self, pose: &Pose) -> Pose {
        Pose::from_joints_unchecked(pose.joints().iter().map(|p| self.apply(p)).collect())
    }
}

fn centroid(points: &[Vec3]) -> Vec3 {
    points.iter().sum::<Vec3>() / points.len() as f64
}

/// Least-squares similarity mapping `pred` onto `truth` from the SVD of the
/// centered cross-covariance. Unless `allow_reflection` is set, the rotation
/// is restricted to `det = +1`.
pub fn align_similarity(pred: &Pose, truth: &Pose, allow_reflection: bool) -> Result<Similarity> {
    check_same_len(pred, truth)?;
    if pred.len() < 3 {
        return Err(Error::DegenerateConfiguration(format!(
            "alignment needs at least 3 joints, got {}",
            pred.len()
        )));
    }
    let n = pred.len() as f64;
    let mu_p = centroid(pred.joints());
    let mu_t = centroid(truth.joints());
    let mut cov = Matrix3::zeros();
    let mut var_p = 0.0;
    for (p, t) in pred.joints().iter().zip(truth.joints()) {
        let x = p - mu_p;
        cov += (t - mu_t) * x.transpose();
        var_p += x.norm_squared();
    }
    cov /= n;
    var_p /= n;
    if !(var_p > DEGENERATE_VARIANCE) {
        return Err(Error::DegenerateConfiguration(
            "centered prediction has zero variance".into(),
        ));
    }
    let svd = cov.svd(true, true);
    let u = svd.u.expect("requested");
    let v_t = svd.v_t.expect("requested");
    let mut signs = Vec3::new(1.0, 1.0, 1.0);
    if !allow_reflection && (u.determinant() * v_t.determinant()) < 0.0 {
        let smallest = svd.singular_values.imin();
        signs[smallest] = -1.0;
    }
    let rotation = u * Matrix3::from_diagonal(&signs) * v_t;
    let scale = svd.singular_values.dot(&signs) / var_p;
    let translation = mu_t - rotation * mu_p * scale;
    Ok(Similarity {
        scale,
        rotation,
        translation,
    })
}

/// MPJPE after optimal similarity alignment (no reflections), in mm.
pub fn p_mpjpe(pred: &Pose, truth: &Pose) -> Result<f64> {
    p_mpjpe_with(pred, truth, false)
}

pub fn p_mpjpe_with(pred: &Pose, truth: &Pose, allow_reflection: bool) -> Result<f64> {
    let sim = align_similarity(pred, truth, allow_reflection)?;
    mpjpe(&sim.apply_pose(pred), truth)
}

/// Mean absolute bone-length difference in millimeters.
pub fn bone_length_error(pred: &BoneLengths, truth: &BoneLengths) -> Result<f64> {
    Ok(1000.0 * crate::model::length_loss(pred, truth)?)
}

/// Mean Euclidean distance between corresponding unit bone directions.
pub fn direction_loss(pred: &BoneDirections, truth: &BoneDirections) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::dims("bone directions", truth.len(), pred.len()));
    }
    if pred.is_empty() {
        return Ok(0.0);
    }
    Ok(mean_distance(pred.as_slice(), truth.as_slice()))
}

/// Direction loss plus root-relative position error, the latter in meters.
/// The two terms are added with unit weights.
pub fn total_loss(pred: &Pose, truth: &Pose, topo: &SkeletonTopology) -> Result<f64> {
    let (_, pred_dirs) = decompose_pose(pred, topo)?;
    let (_, truth_dirs) = decompose_pose(truth, topo)?;
    let position = mpjpe(&pred.root_relative(), &truth.root_relative())? / 1000.0;
    Ok(direction_loss(&pred_dirs, &truth_dirs)? + position)
}
