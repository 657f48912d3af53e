//! The bone-length regressor: a linear input projection, a (bi)directional
//! GRU and a bias-free linear head.

mod network;
mod params;
pub mod train;

pub use network::{
    forward_bigru, forward_online, forward_unidirectional, gru_cell, length_loss,
    loss_and_gradients, predict, project_input, OnlineState,
};
pub use params::{GruParams, LengthModelParams, ModelDims};

use crate::augment::{flip_keypoints, mirror_lengths};
use crate::camera::{normalize_keypoints, CameraIntrinsics, KeypointSequence};
use crate::error::{Error, Result};
use crate::skeleton::{BoneLengths, SkeletonTopology};

/// Model input for a pixel-space keypoint sequence.
pub fn model_input(kps: &KeypointSequence, cam: &CameraIntrinsics) -> Vec<Vec<f64>> {
    normalize_keypoints(kps, cam).flattened()
}

/// Predicts lengths for a whole pixel-space sequence. With `flip`, the
/// prediction on the mirrored sequence is mirrored back and averaged in.
pub fn predict_sequence(
    params: &LengthModelParams,
    kps: &KeypointSequence,
    cam: &CameraIntrinsics,
    topo: &SkeletonTopology,
    flip: bool,
) -> Result<BoneLengths> {
    if kps.joint_count() != topo.joint_count() {
        return Err(Error::DimensionMismatch {
            context: "keypoint joints",
            expected: topo.joint_count(),
            actual: kps.joint_count(),
        });
    }
    let direct = predict(&model_input(kps, cam), params)?;
    if !flip {
        return Ok(direct);
    }
    let flipped = flip_keypoints(kps, cam, topo);
    let mirrored = mirror_lengths(&predict(&model_input(&flipped, cam), params)?, topo);
    Ok(BoneLengths::from_raw(
        direct
            .as_slice()
            .iter()
            .zip(mirrored.as_slice())
            .map(|(a, b)| 0.5 * (a + b))
            .collect(),
    ))
}
