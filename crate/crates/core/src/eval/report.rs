use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::metrics::{bone_length_error, mpjpe, p_mpjpe_with};
use crate::error::{Error, Result};
use crate::skeleton::{decompose_pose, PoseSequence, SkeletonTopology};

/// Errors for one action, or for all frames when `action == "overall"`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub action: String,
    pub frames: usize,
    pub mpjpe_mm: f64,
    pub p_mpjpe_mm: f64,
    pub bone_len_err_mm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    /// Sorted by action name.
    pub actions: Vec<ReportRow>,
    pub overall: ReportRow,
    /// Hex SHA-256 of the configuration that produced the predictions.
    pub fingerprint: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Let the Procrustes alignment use improper rotations.
    pub allow_reflection: bool,
}

/// Hex SHA-256 digest.
pub fn fingerprint(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .fold(String::with_capacity(64), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
}

#[derive(Default)]
struct Sums {
    frames: usize,
    mpjpe: f64,
    p_mpjpe: f64,
    bone: f64,
}

impl Sums {
    fn row(&self, action: &str) -> ReportRow {
        let n = self.frames.max(1) as f64;
        ReportRow {
            action: action.to_string(),
            frames: self.frames,
            mpjpe_mm: self.mpjpe / n,
            p_mpjpe_mm: self.p_mpjpe / n,
            bone_len_err_mm: self.bone / n,
        }
    }
}

/// Per-frame errors grouped by the truth sequences' action labels.
/// Prediction labels must match or be empty. Joint errors are measured on
/// root-relative poses; bone errors compare each predicted frame's lengths
/// with the truth frame's.
pub fn evaluate(
    pred: &[PoseSequence],
    truth: &[PoseSequence],
    topo: &SkeletonTopology,
    cfg: &EvalConfig,
    fingerprint: &str,
) -> Result<EvaluationReport> {
    if pred.len() != truth.len() {
        return Err(Error::dims("evaluated sequences", truth.len(), pred.len()));
    }
    let mut groups: BTreeMap<&str, Sums> = BTreeMap::new();
    let mut all = Sums::default();
    for (p, t) in pred.iter().zip(truth) {
        if !p.meta.action.is_empty() && p.meta.action != t.meta.action {
            return Err(Error::LabelMismatch(format!(
                "sequence '{}' is labelled '{}' but the truth says '{}'",
                t.meta.id, p.meta.action, t.meta.action
            )));
        }
        if !p.meta.id.is_empty() && p.meta.id != t.meta.id {
            return Err(Error::LabelMismatch(format!(
                "prediction '{}' is paired with truth '{}'",
                p.meta.id, t.meta.id
            )));
        }
        if p.len() != t.len() {
            return Err(Error::dims("sequence frames", t.len(), p.len()));
        }
        let sums = groups.entry(t.meta.action.as_str()).or_default();
        for (f, (pp, tp)) in p.frames.iter().zip(&t.frames).enumerate() {
            let (pr, tr) = (pp.root_relative(), tp.root_relative());
            let e1 = mpjpe(&pr, &tr)?;
            let e2 = p_mpjpe_with(&pr, &tr, cfg.allow_reflection)?;
            let with_frame = |e: Error| match e {
                Error::DegenerateBone { bone, .. } => Error::DegenerateBone {
                    bone,
                    frame: Some(f),
                },
                other => other,
            };
            let (pl, _) = decompose_pose(pp, topo).map_err(with_frame)?;
            let (tl, _) = decompose_pose(tp, topo).map_err(with_frame)?;
            let e3 = bone_length_error(&pl, &tl)?;
            for s in [&mut *sums, &mut all] {
                s.frames += 1;
                s.mpjpe += e1;
                s.p_mpjpe += e2;
                s.bone += e3;
            }
        }
    }
    let report = EvaluationReport {
        actions: groups.iter().map(|(a, s)| s.row(a)).collect(),
        overall: all.row("overall"),
        fingerprint: fingerprint.to_string(),
    };
    report.check_consistency()?;
    Ok(report)
}

impl EvaluationReport {
    /// Verifies that the overall row is the frame-weighted mean of the
    /// action rows.
    pub fn check_consistency(&self) -> Result<()> {
        let frames: usize = self.actions.iter().map(|r| r.frames).sum();
        if frames != self.overall.frames {
            return Err(Error::InvalidValue(format!(
                "action rows cover {frames} frames, overall row {}",
                self.overall.frames
            )));
        }
        let n = frames.max(1) as f64;
        let weighted = |f: fn(&ReportRow) -> f64| {
            self.actions
                .iter()
                .map(|r| f(r) * r.frames as f64)
                .sum::<f64>()
                / n
        };
        let checks = [
            (weighted(|r| r.mpjpe_mm), self.overall.mpjpe_mm),
            (weighted(|r| r.p_mpjpe_mm), self.overall.p_mpjpe_mm),
            (weighted(|r| r.bone_len_err_mm), self.overall.bone_len_err_mm),
        ];
        for (mean, overall) in checks {
            if (mean - overall).abs() > 1e-9 * overall.abs().max(1.0) {
                return Err(Error::InvalidValue(format!(
                    "overall {overall} differs from the frame-weighted mean {mean}"
                )));
            }
        }
        Ok(())
    }

    pub fn rows(&self) -> impl Iterator<Item = &ReportRow> {
        self.actions.iter().chain(std::iter::once(&self.overall))
    }

    /// One line per action followed by the overall line.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("action,frames,mpjpe_mm,p_mpjpe_mm,bone_len_err_mm\n");
        for r in self.rows() {
            let _ = writeln!(
                out,
                "{},{},{:.6},{:.6},{:.6}",
                r.action, r.frames, r.mpjpe_mm, r.p_mpjpe_mm, r.bone_len_err_mm
            );
        }
        out
    }

    /// Metrics as rows and actions as columns, with the overall value last.
    pub fn to_markdown(&self) -> String {
        let mut out = String::from("| Metric |");
        for r in &self.actions {
            let _ = write!(out, " {} |", r.action);
        }
        out.push_str(" Avg |\n|---|");
        for _ in 0..=self.actions.len() {
            out.push_str("---:|");
        }
        out.push('\n');
        let metrics: [(&str, fn(&ReportRow) -> f64); 3] = [
            ("MPJPE (mm)", |r| r.mpjpe_mm),
            ("P-MPJPE (mm)", |r| r.p_mpjpe_mm),
            ("Bone length error (mm)", |r| r.bone_len_err_mm),
        ];
        for (name, f) in metrics {
            let _ = write!(out, "| {name} |");
            for r in self.rows() {
                let _ = write!(out, " {:.1} |", f(r));
            }
            out.push('\n');
        }
        out
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}
