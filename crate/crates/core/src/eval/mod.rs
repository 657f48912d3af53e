//! Length adjustment of lifted poses, evaluation metrics and reports, and
//! the toy lifter used for fine-tuning.

pub mod lifter;
mod metrics;
mod report;

pub use lifter::{
    finetune_loss_and_gradient, finetune_toy_lifter, FinetuneConfig, FinetuneLog, FinetuneTarget,
    LifterConfig, ToyLifter,
};
pub use metrics::{
    align_similarity, bone_length_error, direction_loss, mpjpe, p_mpjpe, p_mpjpe_with,
    total_loss, Similarity, DEGENERATE_VARIANCE,
};
pub use report::{evaluate, fingerprint, EvalConfig, EvaluationReport, ReportRow};

use crate::augment::replace_sequence_lengths;
use crate::error::Result;
use crate::skeleton::{BoneLengths, PoseSequence, SkeletonTopology};

/// Gives every frame of a predicted sequence the same bone lengths while
/// keeping its bone directions and root positions.
pub fn adjust_poses(
    pred: &PoseSequence,
    lengths: &BoneLengths,
    topo: &SkeletonTopology,
) -> Result<PoseSequence> {
    replace_sequence_lengths(pred, lengths, topo)
}
