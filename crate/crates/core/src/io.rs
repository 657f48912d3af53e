//! On-disk formats.
//!
//! A tensor bundle is one file: an 8-byte little-endian manifest length, the
//! manifest as UTF-8 JSON, then every array's `f32` values in row-major,
//! little-endian order, concatenated in manifest order.

use std::collections::HashSet;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::camera::{KeypointSequence, Vec2, NORMALIZATION};
use crate::error::{Error, Result};
use crate::eval::ToyLifter;
use crate::model::{LengthModelParams, ModelDims};
use crate::skeleton::{BoneLengths, Pose, PoseSequence, SequenceMeta, SkeletonTopology, Vec3};

pub const BUNDLE_SCHEMA: u64 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArraySpec {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    schema: u64,
    arrays: Vec<ArraySpec>,
    #[serde(default)]
    metadata: Map<String, Value>,
}

/// Named `f32` arrays plus a free-form JSON metadata map.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TensorBundle {
    specs: Vec<ArraySpec>,
    data: Vec<Vec<f32>>,
    pub metadata: Map<String, Value>,
}

impl TensorBundle {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) -> Result<()> {
        let name = name.into();
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(Error::dims("bundle array elements", expected, data.len()));
        }
        if self.specs.iter().any(|s| s.name == name) {
            return Err(Error::InvalidValue(format!("duplicate array name {name:?}")));
        }
        self.specs.push(ArraySpec {
            name,
            dtype: "f32".into(),
            shape,
        });
        self.data.push(data);
        Ok(())
    }

    /// Stores `f64` values rounded to `f32`.
    pub fn push_f64(&mut self, name: impl Into<String>, shape: Vec<usize>, data: &[f64]) -> Result<()> {
        self.push(name, shape, data.iter().map(|&v| v as f32).collect())
    }

    pub fn specs(&self) -> &[ArraySpec] {
        &self.specs
    }

    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<(&[usize], &[f32])> {
        let i = self.specs.iter().position(|s| s.name == name)?;
        Some((&self.specs[i].shape, &self.data[i]))
    }

    /// Array `name` widened to `f64`, checked against `shape`.
    pub fn get_f64(&self, name: &str, shape: &[usize]) -> Result<Vec<f64>> {
        let (actual, data) = self
            .get(name)
            .ok_or_else(|| Error::InvalidValue(format!("bundle has no array {name:?}")))?;
        if actual != shape {
            return Err(Error::InvalidValue(format!(
                "array {name:?} has shape {actual:?}, expected {shape:?}"
            )));
        }
        Ok(data.iter().map(|&v| v as f64).collect())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let manifest = Manifest {
            schema: BUNDLE_SCHEMA,
            arrays: self.specs.clone(),
            metadata: self.metadata.clone(),
        };
        let header = serde_json::to_vec(&manifest).expect("manifest serializes");
        let payload: usize = self.data.iter().map(Vec::len).sum();
        let mut out = Vec::with_capacity(8 + header.len() + 4 * payload);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for array in &self.data {
            for v in array {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: String| Error::InvalidValue(m);
        let len_bytes: [u8; 8] = bytes
            .get(..8)
            .ok_or_else(|| bad("bundle is shorter than its length prefix".into()))?
            .try_into()
            .expect("8 bytes");
        let header_len = usize::try_from(u64::from_le_bytes(len_bytes))
            .map_err(|_| bad("manifest length overflows".into()))?;
        let header = bytes
            .get(8..8usize.saturating_add(header_len))
            .ok_or_else(|| bad("bundle manifest is truncated".into()))?;
        let manifest: Manifest =
            serde_json::from_slice(header).map_err(|e| bad(format!("bad manifest: {e}")))?;
        if manifest.schema != BUNDLE_SCHEMA {
            return Err(bad(format!("unsupported bundle schema {}", manifest.schema)));
        }
        let mut names = HashSet::new();
        let mut total = 0usize;
        for spec in &manifest.arrays {
            if spec.dtype != "f32" {
                return Err(bad(format!("array {:?} has dtype {:?}", spec.name, spec.dtype)));
            }
            if !names.insert(spec.name.as_str()) {
                return Err(bad(format!("duplicate array name {:?}", spec.name)));
            }
            total = spec
                .shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .and_then(|n| total.checked_add(n))
                .ok_or_else(|| bad("array sizes overflow".into()))?;
        }
        let payload = &bytes[8 + header_len..];
        if Some(payload.len()) != total.checked_mul(4) {
            return Err(bad(format!(
                "payload has {} bytes, manifest describes {}",
                payload.len(),
                total.saturating_mul(4)
            )));
        }
        let mut data = Vec::with_capacity(manifest.arrays.len());
        let mut offset = 0;
        for spec in &manifest.arrays {
            let n: usize = spec.shape.iter().product();
            let values = payload[offset..offset + 4 * n]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            offset += 4 * n;
            data.push(values);
        }
        Ok(Self {
            specs: manifest.arrays,
            data,
            metadata: manifest.metadata,
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| Error::schema(path, e.to_string()))
    }

    fn meta_str(&self, key: &str) -> Result<&str> {
        self.metadata
            .get(key)
            .and_then(Value::as_str)
            .ok_or_else(|| Error::InvalidValue(format!("bundle metadata lacks string {key:?}")))
    }

    fn meta_u64(&self, key: &str) -> Result<u64> {
        self.metadata
            .get(key)
            .and_then(Value::as_u64)
            .ok_or_else(|| Error::InvalidValue(format!("bundle metadata lacks integer {key:?}")))
    }

    fn meta_bool(&self, key: &str) -> Result<bool> {
        self.metadata
            .get(key)
            .and_then(Value::as_bool)
            .ok_or_else(|| Error::InvalidValue(format!("bundle metadata lacks boolean {key:?}")))
    }

    fn expect_kind(&self, kind: &str) -> Result<()> {
        let found = self.meta_str("kind")?;
        if found != kind {
            return Err(Error::InvalidValue(format!(
                "expected a {kind:?} bundle, found {found:?}"
            )));
        }
        Ok(())
    }
}

/// Whatever is known about one sequence. Records in a set share a joint
/// count.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceRecord {
    pub meta: SequenceMeta,
    pub fps: f64,
    pub poses: Option<PoseSequence>,
    pub keypoints: Option<KeypointSequence>,
    pub lengths: Option<BoneLengths>,
}

impl SequenceRecord {
    pub fn new(meta: SequenceMeta, fps: f64) -> Self {
        Self {
            meta,
            fps,
            poses: None,
            keypoints: None,
            lengths: None,
        }
    }

    pub fn frames(&self) -> Option<usize> {
        self.poses
            .as_ref()
            .map(PoseSequence::len)
            .or_else(|| self.keypoints.as_ref().map(KeypointSequence::len))
    }

    pub fn require_poses(&self) -> Result<&PoseSequence> {
        self.poses
            .as_ref()
            .ok_or_else(|| Error::InvalidValue(format!("sequence {:?} has no poses", self.meta.id)))
    }

    pub fn require_keypoints(&self) -> Result<&KeypointSequence> {
        self.keypoints.as_ref().ok_or_else(|| {
            Error::InvalidValue(format!("sequence {:?} has no keypoints", self.meta.id))
        })
    }

    pub fn require_lengths(&self) -> Result<&BoneLengths> {
        self.lengths.as_ref().ok_or_else(|| {
            Error::InvalidValue(format!("sequence {:?} has no bone lengths", self.meta.id))
        })
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordHeader {
    id: String,
    subject: String,
    action: String,
    camera: String,
    fps: f64,
    frames: usize,
}

/// Ordered sequences stored under `<id>/poses` (`F x J x 3`),
/// `<id>/keypoints` (`F x J x 2`), `<id>/confidence` (`F x J`) and
/// `<id>/lengths` (`J-1`).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SequenceSet {
    pub records: Vec<SequenceRecord>,
}

impl SequenceSet {
    pub fn new(records: Vec<SequenceRecord>) -> Self {
        Self { records }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn to_bundle(&self, topo: &SkeletonTopology) -> Result<TensorBundle> {
        let joints = topo.joint_count();
        let mut bundle = TensorBundle::new();
        let mut headers = Vec::with_capacity(self.records.len());
        for rec in &self.records {
            let id = &rec.meta.id;
            let frames = rec.frames().unwrap_or(0);
            if let Some(p) = &rec.poses {
                if p.frames.iter().any(|f| f.len() != joints) {
                    return Err(Error::dims("stored pose joints", joints, p.frames[0].len()));
                }
                let data: Vec<f64> = p
                    .frames
                    .iter()
                    .flat_map(|f| f.joints().iter().flat_map(|j| [j.x, j.y, j.z]))
                    .collect();
                bundle.push_f64(format!("{id}/poses"), vec![p.len(), joints, 3], &data)?;
            }
            if let Some(k) = &rec.keypoints {
                if k.joint_count() != joints {
                    return Err(Error::dims("stored keypoint joints", joints, k.joint_count()));
                }
                if k.len() != frames {
                    return Err(Error::dims("stored keypoint frames", frames, k.len()));
                }
                let data: Vec<f64> = k.flattened().concat();
                bundle.push_f64(format!("{id}/keypoints"), vec![k.len(), joints, 2], &data)?;
                if let Some(c) = &k.confidence {
                    bundle.push_f64(format!("{id}/confidence"), vec![k.len(), joints], &c.concat())?;
                }
            }
            if let Some(l) = &rec.lengths {
                if l.len() != topo.bone_count() {
                    return Err(Error::dims("stored bone lengths", topo.bone_count(), l.len()));
                }
                bundle.push_f64(format!("{id}/lengths"), vec![l.len()], l.as_slice())?;
            }
            headers.push(RecordHeader {
                id: id.clone(),
                subject: rec.meta.subject.clone(),
                action: rec.meta.action.clone(),
                camera: rec.meta.camera.clone(),
                fps: rec.fps,
                frames,
            });
        }
        bundle.metadata.insert("kind".into(), json!("sequences"));
        bundle.metadata.insert("joints".into(), json!(joints));
        bundle.metadata.insert("normalization".into(), json!(NORMALIZATION));
        bundle
            .metadata
            .insert("sequences".into(), serde_json::to_value(headers).expect("headers serialize"));
        Ok(bundle)
    }

    pub fn from_bundle(bundle: &TensorBundle, topo: &SkeletonTopology) -> Result<Self> {
        bundle.expect_kind("sequences")?;
        let joints = bundle.meta_u64("joints")? as usize;
        if joints != topo.joint_count() {
            return Err(Error::dims("bundle joints", topo.joint_count(), joints));
        }
        let headers: Vec<RecordHeader> = serde_json::from_value(
            bundle
                .metadata
                .get("sequences")
                .cloned()
                .ok_or_else(|| Error::InvalidValue("bundle lists no sequences".into()))?,
        )
        .map_err(|e| Error::InvalidValue(format!("bad sequence list: {e}")))?;
        let mut records = Vec::with_capacity(headers.len());
        for h in headers {
            let meta = SequenceMeta {
                id: h.id.clone(),
                subject: h.subject,
                action: h.action,
                camera: h.camera,
            };
            let mut rec = SequenceRecord::new(meta.clone(), h.fps);
            let id = &h.id;
            if bundle.get(&format!("{id}/poses")).is_some() {
                let data = bundle.get_f64(&format!("{id}/poses"), &[h.frames, joints, 3])?;
                let frames = data
                    .chunks_exact(3 * joints)
                    .map(|f| Pose::new(f.chunks_exact(3).map(|c| Vec3::new(c[0], c[1], c[2])).collect()))
                    .collect::<Result<Vec<_>>>()?;
                rec.poses = Some(PoseSequence::new(frames, h.fps, meta.clone())?);
            }
            if bundle.get(&format!("{id}/keypoints")).is_some() {
                let data = bundle.get_f64(&format!("{id}/keypoints"), &[h.frames, joints, 2])?;
                let frames = data
                    .chunks_exact(2 * joints)
                    .map(|f| f.chunks_exact(2).map(|c| Vec2::new(c[0], c[1])).collect())
                    .collect();
                let mut kps = KeypointSequence::new(frames, meta.clone())?;
                if bundle.get(&format!("{id}/confidence")).is_some() {
                    let c = bundle.get_f64(&format!("{id}/confidence"), &[h.frames, joints])?;
                    kps.confidence = Some(c.chunks_exact(joints).map(<[f64]>::to_vec).collect());
                }
                rec.keypoints = Some(kps);
            }
            if bundle.get(&format!("{id}/lengths")).is_some() {
                let data = bundle.get_f64(&format!("{id}/lengths"), &[topo.bone_count()])?;
                rec.lengths = Some(BoneLengths::new(data)?);
            }
            records.push(rec);
        }
        Ok(Self { records })
    }

    pub fn write(&self, path: impl AsRef<Path>, topo: &SkeletonTopology) -> Result<()> {
        self.to_bundle(topo)?.write(path)
    }

    pub fn read(path: impl AsRef<Path>, topo: &SkeletonTopology) -> Result<Self> {
        let path = path.as_ref();
        Self::from_bundle(&TensorBundle::read(path)?, topo)
            .map_err(|e| Error::schema(path, e.to_string()))
    }
}

fn push_matrix(bundle: &mut TensorBundle, name: &str, m: &DMatrix<f64>) -> Result<()> {
    // nalgebra is column-major; bundles are row-major.
    let data: Vec<f64> = m.transpose().as_slice().to_vec();
    bundle.push_f64(name, vec![m.nrows(), m.ncols()], &data)
}

fn read_matrix(bundle: &TensorBundle, name: &str, rows: usize, cols: usize) -> Result<DMatrix<f64>> {
    let data = bundle.get_f64(name, &[rows, cols])?;
    Ok(DMatrix::from_row_slice(rows, cols, &data))
}

/// Length-model checkpoint: every tensor in declaration order, with the
/// model dimensions, seed and keypoint normalization in the metadata.
pub fn checkpoint_to_bundle(params: &LengthModelParams, seed: u64) -> Result<TensorBundle> {
    let dims = params.dims();
    let mut bundle = TensorBundle::new();
    for (name, t) in params.named_tensors() {
        push_matrix(&mut bundle, &name, t)?;
    }
    let m = &mut bundle.metadata;
    m.insert("kind".into(), json!("length-model"));
    m.insert("schema".into(), json!(1));
    m.insert("c".into(), json!(dims.c));
    m.insert("c_prime".into(), json!(dims.c_prime));
    m.insert("J".into(), json!(dims.joints));
    m.insert("bidirectional".into(), json!(dims.bidirectional));
    m.insert("seed".into(), json!(seed));
    m.insert("normalization".into(), json!(NORMALIZATION));
    Ok(bundle)
}

pub fn checkpoint_from_bundle(bundle: &TensorBundle) -> Result<LengthModelParams> {
    bundle.expect_kind("length-model")?;
    if bundle.meta_u64("schema")? != 1 {
        return Err(Error::InvalidValue("unsupported checkpoint schema".into()));
    }
    let norm = bundle.meta_str("normalization")?;
    if norm != NORMALIZATION {
        return Err(Error::InvalidValue(format!(
            "checkpoint expects keypoint normalization {norm:?}, this build uses {NORMALIZATION:?}"
        )));
    }
    let dims = ModelDims {
        joints: bundle.meta_u64("J")? as usize,
        c: bundle.meta_u64("c")? as usize,
        c_prime: bundle.meta_u64("c_prime")? as usize,
        bidirectional: bundle.meta_bool("bidirectional")?,
    };
    let mut params = LengthModelParams::zeros(dims)?;
    let names: Vec<String> = params.named_tensors().into_iter().map(|(n, _)| n).collect();
    if names.len() != bundle.len() {
        return Err(Error::dims("checkpoint tensors", names.len(), bundle.len()));
    }
    for (name, t) in names.iter().zip(params.tensors_mut()) {
        *t = read_matrix(bundle, name, t.nrows(), t.ncols())?;
    }
    if !params.is_finite() {
        return Err(Error::InvalidValue("checkpoint holds non-finite weights".into()));
    }
    Ok(params)
}

pub fn save_checkpoint(path: impl AsRef<Path>, params: &LengthModelParams, seed: u64) -> Result<()> {
    checkpoint_to_bundle(params, seed)?.write(path)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<LengthModelParams> {
    let path = path.as_ref();
    checkpoint_from_bundle(&TensorBundle::read(path)?).map_err(|e| Error::schema(path, e.to_string()))
}

pub fn lifter_to_bundle(lifter: &ToyLifter) -> Result<TensorBundle> {
    let mut bundle = TensorBundle::new();
    push_matrix(&mut bundle, "lifter.w", lifter.weights())?;
    bundle.metadata.insert("kind".into(), json!("toy-lifter"));
    bundle.metadata.insert("J".into(), json!(lifter.joints()));
    bundle
        .metadata
        .insert("half_window".into(), json!(lifter.half_window()));
    bundle.metadata.insert("normalization".into(), json!(NORMALIZATION));
    Ok(bundle)
}

pub fn lifter_from_bundle(bundle: &TensorBundle) -> Result<ToyLifter> {
    bundle.expect_kind("toy-lifter")?;
    let joints = bundle.meta_u64("J")? as usize;
    let w = bundle.meta_u64("half_window")? as usize;
    let shape = ToyLifter::zeros(joints, w);
    let weights = read_matrix(bundle, "lifter.w", 3 * joints, shape.feature_dim())?;
    ToyLifter::new(weights, w, joints)
}

pub fn save_lifter(path: impl AsRef<Path>, lifter: &ToyLifter) -> Result<()> {
    lifter_to_bundle(lifter)?.write(path)
}

pub fn load_lifter(path: impl AsRef<Path>) -> Result<ToyLifter> {
    let path = path.as_ref();
    lifter_from_bundle(&TensorBundle::read(path)?).map_err(|e| Error::schema(path, e.to_string()))
}

/// Rounds every weight to `f32`, matching what a checkpoint stores.
pub fn round_to_f32(params: &LengthModelParams) -> LengthModelParams {
    let mut out = params.clone();
    for t in out.tensors_mut() {
        t.iter_mut().for_each(|v| *v = *v as f32 as f64);
    }
    out
}
