//! Tree-structured skeletons and the exact decomposition of a pose into bone
//! lengths and bone directions.
//!
//! Joints are numbered `0..J` with the root at `0`. Bone `i` (for `1 <= i < J`)
//! is the edge from joint `i` to its parent, so bones are labelled by their
//! child joint. Per-bone vectors ([`BoneLengths`], [`BoneDirections`]) store
//! bone `i` at offset `i - 1`.

use std::path::Path;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;

/// Bones shorter than this are treated as corrupt input.
pub const DEGENERATE_BONE_EPS: f64 = 1e-12;

/// Tolerance on `|d| = 1` accepted by [`reconstruct_pose`].
pub const UNIT_TOLERANCE: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct SkeletonTopology {
    parents: Vec<Option<usize>>,
    bone_names: Vec<String>,
    symmetry_pairs: Vec<(usize, usize)>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TopologyFile {
    joint_count: usize,
    parents: Vec<i64>,
    bone_names: Vec<String>,
    symmetry_pairs: Vec<[usize; 2]>,
}

impl SkeletonTopology {
    /// Builds a topology, checking that `parents` is a topologically ordered
    /// tree rooted at joint 0 and that symmetry pairs are disjoint.
    pub fn new(
        parents: Vec<Option<usize>>,
        bone_names: Vec<String>,
        symmetry_pairs: Vec<(usize, usize)>,
    ) -> Result<Self> {
        let joints = parents.len();
        if joints < 2 {
            return Err(Error::InvalidTopology("need at least two joints".into()));
        }
        if parents[0].is_some() {
            return Err(Error::InvalidTopology("joint 0 must be the root".into()));
        }
        for (i, p) in parents.iter().enumerate().skip(1) {
            match p {
                None => {
                    return Err(Error::InvalidTopology(format!(
                        "joint {i} has no parent; only joint 0 may be a root"
                    )))
                }
                Some(p) if *p >= i => {
                    return Err(Error::InvalidTopology(format!(
                        "parent of joint {i} is {p}; parents must precede their children"
                    )))
                }
                _ => {}
            }
        }
        if bone_names.len() != joints - 1 {
            return Err(Error::InvalidTopology(format!(
                "expected {} bone names, got {}",
                joints - 1,
                bone_names.len()
            )));
        }
        let mut used = vec![false; joints];
        for &(a, b) in &symmetry_pairs {
            for bone in [a, b] {
                if bone == 0 || bone >= joints {
                    return Err(Error::InvalidTopology(format!(
                        "symmetry pair references bone {bone}, valid bones are 1..{}",
                        joints - 1
                    )));
                }
                if used[bone] {
                    return Err(Error::InvalidTopology(format!(
                        "bone {bone} appears in more than one symmetry pair"
                    )));
                }
                used[bone] = true;
            }
            if a == b {
                return Err(Error::InvalidTopology(format!("bone {a} paired with itself")));
            }
        }
        Ok(Self {
            parents,
            bone_names,
            symmetry_pairs,
        })
    }

    /// The 17-joint Human3.6M skeleton shipped in `fixtures/topology_h36m17.json`.
    pub fn h36m17() -> Self {
        Self::from_json_str(include_str!("../../../fixtures/topology_h36m17.json"))
            .expect("bundled topology is valid")
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        Self::parse(text, Path::new("<inline>"))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    fn parse(text: &str, path: &Path) -> Result<Self> {
        let file: TopologyFile =
            serde_json::from_str(text).map_err(|e| Error::schema(path, e.to_string()))?;
        if file.parents.len() != file.joint_count {
            return Err(Error::schema(
                path,
                format!(
                    "joint_count is {} but parents has {} entries",
                    file.joint_count,
                    file.parents.len()
                ),
            ));
        }
        let parents = file
            .parents
            .iter()
            .map(|&p| match p {
                -1 => Ok(None),
                p if p >= 0 => Ok(Some(p as usize)),
                p => Err(Error::schema(path, format!("invalid parent index {p}"))),
            })
            .collect::<Result<Vec<_>>>()?;
        let pairs = file.symmetry_pairs.iter().map(|[a, b]| (*a, *b)).collect();
        Self::new(parents, file.bone_names, pairs)
    }

    pub fn to_json_string(&self) -> String {
        let file = TopologyFile {
            joint_count: self.joint_count(),
            parents: self
                .parents
                .iter()
                .map(|p| p.map_or(-1, |p| p as i64))
                .collect(),
            bone_names: self.bone_names.clone(),
            symmetry_pairs: self.symmetry_pairs.iter().map(|&(a, b)| [a, b]).collect(),
        };
        serde_json::to_string_pretty(&file).expect("topology serializes")
    }

    pub fn joint_count(&self) -> usize {
        self.parents.len()
    }

    pub fn bone_count(&self) -> usize {
        self.parents.len() - 1
    }

    /// Parent of `joint`, `None` for the root.
    pub fn parent(&self, joint: usize) -> Option<usize> {
        self.parents[joint]
    }

    pub fn parents(&self) -> &[Option<usize>] {
        &self.parents
    }

    pub fn bone_names(&self) -> &[String] {
        &self.bone_names
    }

    /// Left/right bone pairs, by bone label (child joint index).
    pub fn symmetry_pairs(&self) -> &[(usize, usize)] {
        &self.symmetry_pairs
    }

    /// Left/right joint pairs. A bone pair `(a, b)` mirrors child joints `a`
    /// and `b`, so the joint pairs carry the same indices.
    pub fn joint_pairs(&self) -> &[(usize, usize)] {
        &self.symmetry_pairs
    }

    /// Permutation of bone slots that exchanges left and right bones.
    pub fn mirrored_bone_slots(&self) -> Vec<usize> {
        let mut perm: Vec<usize> = (0..self.bone_count()).collect();
        for &(a, b) in &self.symmetry_pairs {
            perm.swap(a - 1, b - 1);
        }
        perm
    }

    /// Permutation of joints that exchanges left and right joints.
    pub fn mirrored_joints(&self) -> Vec<usize> {
        let mut perm: Vec<usize> = (0..self.joint_count()).collect();
        for &(a, b) in self.joint_pairs() {
            perm.swap(a, b);
        }
        perm
    }

    /// Joints whose bone chain passes through bone `bone` (inclusive).
    pub fn subtree(&self, bone: usize) -> Vec<usize> {
        let mut inside = vec![false; self.joint_count()];
        inside[bone] = true;
        for j in bone + 1..self.joint_count() {
            if let Some(p) = self.parents[j] {
                inside[j] = inside[p];
            }
        }
        (0..self.joint_count()).filter(|&j| inside[j]).collect()
    }
}

/// A single skeleton configuration: `J` joint positions in meters.
#[derive(Clone, Debug, PartialEq)]
pub struct Pose {
    joints: Vec<Vec3>,
}

impl Pose {
    pub fn new(joints: Vec<Vec3>) -> Result<Self> {
        if let Some(j) = joints.iter().position(|p| !p.iter().all(|v| v.is_finite())) {
            return Err(Error::InvalidValue(format!("joint {j} has a non-finite coordinate")));
        }
        Ok(Self { joints })
    }

    pub(crate) fn from_joints_unchecked(joints: Vec<Vec3>) -> Self {
        Self { joints }
    }

    pub fn joints(&self) -> &[Vec3] {
        &self.joints
    }

    pub fn into_joints(self) -> Vec<Vec3> {
        self.joints
    }

    pub fn len(&self) -> usize {
        self.joints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.joints.is_empty()
    }

    pub fn root(&self) -> Vec3 {
        self.joints[0]
    }

    pub fn translated(&self, offset: &Vec3) -> Pose {
        Pose {
            joints: self.joints.iter().map(|p| p + offset).collect(),
        }
    }

    /// The same pose with the root moved to the origin.
    pub fn root_relative(&self) -> Pose {
        self.translated(&-self.root())
    }
}

/// Identifying labels carried by every sequence.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SequenceMeta {
    pub id: String,
    pub subject: String,
    pub action: String,
    pub camera: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PoseSequence {
    pub frames: Vec<Pose>,
    pub fps: f64,
    pub meta: SequenceMeta,
}

impl PoseSequence {
    pub fn new(frames: Vec<Pose>, fps: f64, meta: SequenceMeta) -> Result<Self> {
        let Some(first) = frames.first() else {
            return Err(Error::InvalidValue("a pose sequence needs at least one frame".into()));
        };
        let joints = first.len();
        if let Some(f) = frames.iter().position(|p| p.len() != joints) {
            return Err(Error::dims("pose sequence frame", joints, frames[f].len()));
        }
        Ok(Self { frames, fps, meta })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// Per-bone lengths, bone `i` at offset `i - 1`.
///
/// Lengths produced from real poses are strictly positive; model outputs may
/// not be, so construction through [`BoneLengths::from_raw`] skips the check
/// and consumers that need valid lengths call [`BoneLengths::validate`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct BoneLengths(Vec<f64>);

impl BoneLengths {
    pub fn new(lengths: Vec<f64>) -> Result<Self> {
        let out = Self(lengths);
        out.validate()?;
        Ok(out)
    }

    pub fn from_raw(lengths: Vec<f64>) -> Self {
        Self(lengths)
    }

    pub fn validate(&self) -> Result<()> {
        match self.0.iter().position(|l| !(l.is_finite() && *l > 0.0)) {
            Some(i) => Err(Error::InvalidValue(format!(
                "bone {} has invalid length {}",
                i + 1,
                self.0[i]
            ))),
            None => Ok(()),
        }
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Length of bone `bone` (labelled by child joint).
    pub fn bone(&self, bone: usize) -> f64 {
        self.0[bone - 1]
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self(self.0.iter().map(|l| l * factor).collect())
    }
}

/// Per-bone unit vectors pointing from parent to child.
#[derive(Clone, Debug, PartialEq)]
pub struct BoneDirections(Vec<Vec3>);

impl BoneDirections {
    pub fn new(directions: Vec<Vec3>) -> Result<Self> {
        for (i, d) in directions.iter().enumerate() {
            if !((d.norm() - 1.0).abs() <= UNIT_TOLERANCE) {
                return Err(Error::InvalidValue(format!(
                    "direction of bone {} has norm {}",
                    i + 1,
                    d.norm()
                )));
            }
        }
        Ok(Self(directions))
    }

    pub fn as_slice(&self) -> &[Vec3] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

fn check_joint_count(pose: &Pose, topo: &SkeletonTopology) -> Result<()> {
    if pose.len() != topo.joint_count() {
        return Err(Error::dims("pose joints", topo.joint_count(), pose.len()));
    }
    Ok(())
}

/// Splits a pose into bone lengths and unit bone directions.
pub fn decompose_pose(
    pose: &Pose,
    topo: &SkeletonTopology,
) -> Result<(BoneLengths, BoneDirections)> {
    check_joint_count(pose, topo)?;
    let joints = pose.joints();
    let mut lengths = Vec::with_capacity(topo.bone_count());
    let mut dirs = Vec::with_capacity(topo.bone_count());
    for i in 1..topo.joint_count() {
        let offset = joints[i] - joints[topo.parents[i].expect("validated")];
        let len = offset.norm();
        if !(len >= DEGENERATE_BONE_EPS) {
            return Err(Error::DegenerateBone {
                bone: i,
                frame: None,
            });
        }
        lengths.push(len);
        dirs.push(offset / len);
    }
    Ok((BoneLengths(lengths), BoneDirections(dirs)))
}

/// Rebuilds joint positions from the root outwards.
pub fn reconstruct_pose(
    lengths: &BoneLengths,
    dirs: &BoneDirections,
    root: Vec3,
    topo: &SkeletonTopology,
) -> Result<Pose> {
    if lengths.len() != topo.bone_count() {
        return Err(Error::dims("bone lengths", topo.bone_count(), lengths.len()));
    }
    if dirs.len() != topo.bone_count() {
        return Err(Error::dims("bone directions", topo.bone_count(), dirs.len()));
    }
    lengths.validate()?;
    for (i, d) in dirs.0.iter().enumerate() {
        if !((d.norm() - 1.0).abs() <= UNIT_TOLERANCE) {
            return Err(Error::InvalidValue(format!(
                "direction of bone {} is not unit length",
                i + 1
            )));
        }
    }
    Ok(Pose::from_joints_unchecked(forward_kinematics(
        lengths.as_slice(),
        dirs.as_slice(),
        root,
        topo,
    )))
}

/// Unchecked forward kinematics shared by the validated entry points and the
/// differentiable fine-tuning path.
pub(crate) fn forward_kinematics(
    lengths: &[f64],
    dirs: &[Vec3],
    root: Vec3,
    topo: &SkeletonTopology,
) -> Vec<Vec3> {
    let mut joints = Vec::with_capacity(topo.joint_count());
    joints.push(root);
    for i in 1..topo.joint_count() {
        let parent = joints[topo.parents[i].expect("validated")];
        joints.push(parent + dirs[i - 1] * lengths[i - 1]);
    }
    joints
}

/// Keeps every bone direction and the root position of `pose` while giving
/// its bones `new_lengths`.
pub fn replace_lengths(
    pose: &Pose,
    new_lengths: &BoneLengths,
    topo: &SkeletonTopology,
) -> Result<Pose> {
    let (_, dirs) = decompose_pose(pose, topo)?;
    reconstruct_pose(new_lengths, &dirs, pose.root(), topo)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chain() -> SkeletonTopology {
        SkeletonTopology::new(vec![None, Some(0)], vec!["b".into()], vec![]).unwrap()
    }

    #[test]
    fn single_bone_decomposes() {
        let pose = Pose::new(vec![Vec3::zeros(), Vec3::new(0.0, 0.0, 2.0)]).unwrap();
        let (l, d) = decompose_pose(&pose, &chain()).unwrap();
        assert_eq!(l.as_slice(), &[2.0]);
        assert_eq!(d.as_slice()[0], Vec3::new(0.0, 0.0, 1.0));
    }

    #[test]
    fn zero_length_bone_is_rejected() {
        let p = Vec3::new(1.0, 1.0, 1.0);
        let pose = Pose::new(vec![p, p]).unwrap();
        assert!(matches!(
            decompose_pose(&pose, &chain()),
            Err(Error::DegenerateBone { bone: 1, .. })
        ));
    }

    #[test]
    fn reconstruct_single_bone() {
        let pose = reconstruct_pose(
            &BoneLengths::new(vec![1.0]).unwrap(),
            &BoneDirections::new(vec![Vec3::x()]).unwrap(),
            Vec3::zeros(),
            &chain(),
        )
        .unwrap();
        assert_eq!(pose.joints()[1], Vec3::new(1.0, 0.0, 0.0));
    }

    #[test]
    fn reconstruct_rejects_non_unit_direction() {
        let dirs = BoneDirections(vec![Vec3::new(2.0, 0.0, 0.0)]);
        let err = reconstruct_pose(
            &BoneLengths::new(vec![1.0]).unwrap(),
            &dirs,
            Vec3::zeros(),
            &chain(),
        );
        assert!(matches!(err, Err(Error::InvalidValue(_))));
    }

    #[test]
    fn doubling_lengths_doubles_a_straight_chain() {
        let topo = SkeletonTopology::new(
            vec![None, Some(0), Some(1), Some(2)],
            vec!["a".into(), "b".into(), "c".into()],
            vec![],
        )
        .unwrap();
        let dir = Vec3::new(1.0, 2.0, 2.0) / 3.0;
        let dirs = BoneDirections::new(vec![dir; 3]).unwrap();
        let lengths = BoneLengths::new(vec![0.3, 0.5, 0.7]).unwrap();
        let base = reconstruct_pose(&lengths, &dirs, Vec3::zeros(), &topo).unwrap();
        let doubled = reconstruct_pose(&lengths.scaled(2.0), &dirs, Vec3::zeros(), &topo).unwrap();
        for (a, b) in base.joints().iter().zip(doubled.joints()) {
            assert!((a * 2.0 - b).norm() < 1e-12);
        }
    }

    #[test]
    fn replace_lengths_on_chain() {
        let pose = Pose::new(vec![Vec3::zeros(), Vec3::new(0.0, 0.0, 1.0)]).unwrap();
        let out = replace_lengths(&pose, &BoneLengths::new(vec![2.0]).unwrap(), &chain()).unwrap();
        assert_eq!(out.joints()[1], Vec3::new(0.0, 0.0, 2.0));
    }

    #[test]
    fn topology_rejects_out_of_order_parents() {
        let err = SkeletonTopology::new(
            vec![None, Some(2), Some(0)],
            vec!["a".into(), "b".into()],
            vec![],
        );
        assert!(matches!(err, Err(Error::InvalidTopology(_))));
    }

    #[test]
    fn topology_rejects_overlapping_pairs() {
        let err = SkeletonTopology::new(
            vec![None, Some(0), Some(0), Some(0)],
            vec!["a".into(), "b".into(), "c".into()],
            vec![(1, 2), (2, 3)],
        );
        assert!(matches!(err, Err(Error::InvalidTopology(_))));
    }

    #[test]
    fn bundled_topology_matches_h36m_convention() {
        let topo = SkeletonTopology::h36m17();
        assert_eq!(topo.joint_count(), 17);
        assert_eq!(topo.parent(9), Some(8));
        assert_eq!(topo.parent(14), Some(8));
        assert_eq!(topo.symmetry_pairs().len(), 6);
        let again = SkeletonTopology::from_json_str(&topo.to_json_string()).unwrap();
        assert_eq!(again, topo);
    }

    #[test]
    fn subtree_of_thigh_is_leg() {
        let topo = SkeletonTopology::h36m17();
        assert_eq!(topo.subtree(2), vec![2, 3]);
        assert_eq!(topo.subtree(8), vec![8, 9, 10, 11, 12, 13, 14, 15, 16]);
    }
}
