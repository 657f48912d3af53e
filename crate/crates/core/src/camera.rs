//! Pinhole projection with Brown–Conrady lens distortion (three radial and
//! two tangential coefficients), plus the keypoint normalization fed to the
//! length model.

use std::path::Path;

use nalgebra::Vector2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::skeleton::{PoseSequence, SequenceMeta, Vec3};

pub type Vec2 = Vector2<f64>;

/// Points closer than this to the image plane count as behind the camera.
pub const MIN_DEPTH: f64 = 1e-9;

/// Identifier of the keypoint normalization implemented by
/// [`normalize_keypoints`]; written into data and checkpoint metadata.
pub const NORMALIZATION: &str = "principal-point-centered/width";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// Radial coefficients `k1, k2, k3`.
    pub k: [f64; 3],
    /// Tangential coefficients `p1, p2`.
    pub p: [f64; 2],
    pub width: f64,
    pub height: f64,
}

impl CameraIntrinsics {
    /// Distortion-free camera.
    pub fn pinhole(fx: f64, fy: f64, cx: f64, cy: f64, width: f64, height: f64) -> Result<Self> {
        let cam = Self {
            fx,
            fy,
            cx,
            cy,
            k: [0.0; 3],
            p: [0.0; 2],
            width,
            height,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.fx, self.fy, self.cx, self.cy, self.width, self.height]
            .iter()
            .chain(&self.k)
            .chain(&self.p)
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::InvalidValue("camera parameters must be finite".into()));
        }
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::InvalidValue("focal lengths must be positive".into()));
        }
        if !(self.width > 0.0 && self.height > 0.0) {
            return Err(Error::InvalidValue("image size must be positive".into()));
        }
        Ok(())
    }

    /// The default camera shipped in `fixtures/camera_default.json`.
    pub fn default_fixture() -> Self {
        Self::from_json_str(include_str!("../../../fixtures/camera_default.json"))
            .expect("bundled camera is valid")
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
        let cam: Self =
            serde_json::from_str(text).map_err(|e| Error::schema(path, e.to_string()))?;
        cam.validate()
            .map_err(|e| Error::schema(path, e.to_string()))?;
        Ok(cam)
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("camera serializes")
    }

    pub fn has_tangential_distortion(&self) -> bool {
        self.p != [0.0, 0.0]
    }
}

/// 2D keypoints for `N` frames of `J` joints, in pixels unless normalized.
#[derive(Clone, Debug, PartialEq)]
pub struct KeypointSequence {
    pub frames: Vec<Vec<Vec2>>,
    pub confidence: Option<Vec<Vec<f64>>>,
    pub meta: SequenceMeta,
}

impl KeypointSequence {
    pub fn new(frames: Vec<Vec<Vec2>>, meta: SequenceMeta) -> Result<Self> {
        let Some(first) = frames.first() else {
            return Err(Error::InvalidValue("a keypoint sequence needs at least one frame".into()));
        };
        let joints = first.len();
        for frame in &frames {
            if frame.len() != joints {
                return Err(Error::dims("keypoint frame", joints, frame.len()));
            }
            if !frame.iter().all(|p| p.x.is_finite() && p.y.is_finite()) {
                return Err(Error::InvalidValue("keypoints must be finite".into()));
            }
        }
        Ok(Self {
            frames,
            confidence: None,
            meta,
        })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn joint_count(&self) -> usize {
        self.frames.first().map_or(0, Vec::len)
    }

    /// Each frame as `[u0, v0, u1, v1, ...]`.
    pub fn flattened(&self) -> Vec<Vec<f64>> {
        self.frames
            .iter()
            .map(|f| f.iter().flat_map(|p| [p.x, p.y]).collect())
            .collect()
    }
}

/// Projects a camera-space point to pixel coordinates.
pub fn project_point(p: &Vec3, cam: &CameraIntrinsics) -> Result<Vec2> {
    if !(p.z > MIN_DEPTH) {
        return Err(Error::BehindCamera {
            frame: None,
            joint: None,
        });
    }
    let x = p.x / p.z;
    let y = p.y / p.z;
    let r2 = x * x + y * y;
    let [k1, k2, k3] = cam.k;
    let [p1, p2] = cam.p;
    let radial = 1.0 + r2 * (k1 + r2 * (k2 + r2 * k3));
    let xd = radial * x + 2.0 * p1 * x * y + p2 * (r2 + 2.0 * x * x);
    let yd = radial * y + p1 * (r2 + 2.0 * y * y) + 2.0 * p2 * x * y;
    Ok(Vec2::new(cam.fx * xd + cam.cx, cam.fy * yd + cam.cy))
}

pub fn project_sequence(poses: &PoseSequence, cam: &CameraIntrinsics) -> Result<KeypointSequence> {
    let mut frames = Vec::with_capacity(poses.len());
    for (f, pose) in poses.frames.iter().enumerate() {
        let frame = pose
            .joints()
            .iter()
            .enumerate()
            .map(|(j, p)| {
                project_point(p, cam).map_err(|_| Error::BehindCamera {
                    frame: Some(f),
                    joint: Some(j),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        frames.push(frame);
    }
    let joints = frames.first().map_or(0, Vec::len);
    Ok(KeypointSequence {
        confidence: Some(vec![vec![1.0; joints]; frames.len()]),
        frames,
        meta: poses.meta.clone(),
    })
}

/// Maps pixels to roughly `[-1, 1]`: centered on the principal point and
/// divided by half the image width on both axes, preserving aspect.
pub fn normalize_keypoints(kps: &KeypointSequence, cam: &CameraIntrinsics) -> KeypointSequence {
    let scale = 2.0 / cam.width;
    map_points(kps, |p| {
        Vec2::new((p.x - cam.cx) * scale, (p.y - cam.cy) * scale)
    })
}

pub fn denormalize_keypoints(kps: &KeypointSequence, cam: &CameraIntrinsics) -> KeypointSequence {
    let scale = cam.width / 2.0;
    map_points(kps, |p| Vec2::new(p.x * scale + cam.cx, p.y * scale + cam.cy))
}

fn map_points(kps: &KeypointSequence, f: impl Fn(&Vec2) -> Vec2) -> KeypointSequence {
    KeypointSequence {
        frames: kps
            .frames
            .iter()
            .map(|frame| frame.iter().map(&f).collect())
            .collect(),
        confidence: kps.confidence.clone(),
        meta: kps.meta.clone(),
    }
}
