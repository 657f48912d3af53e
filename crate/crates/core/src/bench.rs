//! Single-frame throughput of the online length model, alone and followed
//! by lifting and length adjustment.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::camera::{CameraIntrinsics, KeypointSequence};
use crate::error::{Error, Result};
use crate::eval::ToyLifter;
use crate::model::{forward_online, model_input, LengthModelParams, OnlineState};
use crate::skeleton::{replace_lengths, SkeletonTopology};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub steps: usize,
    /// Each variant is timed this many times, interleaved; the fastest
    /// round is reported.
    pub rounds: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            steps: 10_000,
            rounds: 3,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub steps: usize,
    pub fps: f64,
    pub median_us: f64,
    pub p95_us: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub update_only: Timing,
    pub update_adjust: Timing,
    /// Frames seen by the online state at the end of the last round.
    pub frames_seen: u64,
}

fn timing(mut samples: Vec<f64>, total: f64) -> Timing {
    if samples.is_empty() {
        return Timing::default();
    }
    samples.sort_by(f64::total_cmp);
    let at = |q: f64| samples[((samples.len() - 1) as f64 * q).round() as usize];
    Timing {
        steps: samples.len(),
        fps: samples.len() as f64 / total,
        median_us: at(0.5) * 1e6,
        p95_us: at(0.95) * 1e6,
    }
}

fn faster(a: Timing, b: Timing) -> Timing {
    if b.fps > a.fps {
        b
    } else {
        a
    }
}

/// Streams `steps` frames (cycling through `stream`) through the online
/// model. The second variant also lifts each frame with `lifter` and gives
/// the lifted pose the current length estimate.
pub fn bench_online(
    model: &LengthModelParams,
    lifter: &ToyLifter,
    stream: &KeypointSequence,
    cam: &CameraIntrinsics,
    topo: &SkeletonTopology,
    cfg: &BenchConfig,
) -> Result<BenchReport> {
    if model.is_bidirectional() {
        return Err(Error::InvalidValue(
            "online benchmarking needs a unidirectional model".into(),
        ));
    }
    if cfg.steps == 0 {
        return Ok(BenchReport::default());
    }
    if stream.is_empty() {
        return Err(Error::InvalidValue("benchmark stream has no frames".into()));
    }
    let inputs = model_input(stream, cam);
    let features = lifter.feature_matrix(stream, cam)?;
    let features: Vec<_> = features.column_iter().map(|c| c.into_owned()).collect();
    let mut report = BenchReport::default();
    for _ in 0..cfg.rounds.max(1) {
        let mut state = OnlineState::new(model);
        let mut samples = Vec::with_capacity(cfg.steps);
        let start = Instant::now();
        for k in 0..cfg.steps {
            let t0 = Instant::now();
            let (next, lengths) = forward_online(&state, &inputs[k % inputs.len()], model)?;
            std::hint::black_box(&lengths);
            state = next;
            samples.push(t0.elapsed().as_secs_f64());
        }
        let only = timing(samples, start.elapsed().as_secs_f64());

        let mut state = OnlineState::new(model);
        let mut samples = Vec::with_capacity(cfg.steps);
        let start = Instant::now();
        for k in 0..cfg.steps {
            let t0 = Instant::now();
            let i = k % inputs.len();
            let (next, lengths) = forward_online(&state, &inputs[i], model)?;
            let pose = lifter.predict_frame(&features[i])?;
            let adjusted = replace_lengths(&pose, &lengths, topo)?;
            std::hint::black_box(&adjusted);
            state = next;
            samples.push(t0.elapsed().as_secs_f64());
        }
        let both = timing(samples, start.elapsed().as_secs_f64());
        report.update_only = faster(report.update_only, only);
        report.update_adjust = faster(report.update_adjust, both);
        report.frames_seen = state.frames_seen;
    }
    Ok(report)
}
