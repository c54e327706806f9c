//! The per-video feature container.
//!
//! Layout: `ACCF` magic, u32 LE version, u32 LE header length, UTF-8 JSON
//! header, then `frame_feat`, `obj_feat`, `boxes`, `scores`, `obj_depth` as
//! contiguous row-major f32 LE arrays with no padding.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const BUNDLE_MAGIC: &[u8; 4] = b"ACCF";
pub const BUNDLE_VERSION: u32 = 1;
const ARRAY_NAMES: [&str; 5] = ["frame_feat", "obj_feat", "boxes", "scores", "obj_depth"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BundleHeader {
    #[serde(rename = "T")]
    pub num_frames: usize,
    #[serde(rename = "N_obj")]
    pub num_objects: usize,
    #[serde(rename = "F")]
    pub feature_dim: usize,
    #[serde(rename = "W")]
    pub width: u32,
    #[serde(rename = "H")]
    pub height: u32,
    pub dtype: String,
    pub arrays: Vec<String>,
}

/// Dense per-video arrays. Absent object slots have score 0 and zeroed
/// features, boxes and depth.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBundle {
    pub num_frames: usize,
    pub num_objects: usize,
    pub feature_dim: usize,
    pub width: u32,
    pub height: u32,
    /// `[T, F]`
    pub frame_feat: Vec<f32>,
    /// `[T, N_obj, F]`
    pub obj_feat: Vec<f32>,
    /// `[T, N_obj, 4]` as (x_min, y_min, x_max, y_max) pixels.
    pub boxes: Vec<f32>,
    /// `[T, N_obj]`
    pub scores: Vec<f32>,
    /// `[T, N_obj]` meters.
    pub obj_depth: Vec<f32>,
}

impl FeatureBundle {
    pub fn zeros(
        num_frames: usize,
        num_objects: usize,
        feature_dim: usize,
        width: u32,
        height: u32,
    ) -> Self {
        let tn = num_frames * num_objects;
        FeatureBundle {
            num_frames,
            num_objects,
            feature_dim,
            width,
            height,
            frame_feat: vec![0.0; num_frames * feature_dim],
            obj_feat: vec![0.0; tn * feature_dim],
            boxes: vec![0.0; tn * 4],
            scores: vec![0.0; tn],
            obj_depth: vec![0.0; tn],
        }
    }

    pub fn header(&self) -> BundleHeader {
        BundleHeader {
            num_frames: self.num_frames,
            num_objects: self.num_objects,
            feature_dim: self.feature_dim,
            width: self.width,
            height: self.height,
            dtype: "f32le".to_string(),
            arrays: ARRAY_NAMES.iter().map(|s| s.to_string()).collect(),
        }
    }

    fn expected_lens(&self) -> [usize; 5] {
        let tn = self.num_frames * self.num_objects;
        [
            self.num_frames * self.feature_dim,
            tn * self.feature_dim,
            tn * 4,
            tn,
            tn,
        ]
    }

    fn arrays(&self) -> [&[f32]; 5] {
        [
            &self.frame_feat,
            &self.obj_feat,
            &self.boxes,
            &self.scores,
            &self.obj_depth,
        ]
    }

    pub fn check_shapes(&self) -> Result<()> {
        for ((name, arr), len) in ARRAY_NAMES
            .iter()
            .zip(self.arrays())
            .zip(self.expected_lens())
        {
            if arr.len() != len {
                return Err(Error::Shape(format!(
                    "{name}: expected {len} values, found {}",
                    arr.len()
                )));
            }
        }
        Ok(())
    }

    pub fn frame_row(&self, t: usize) -> &[f32] {
        &self.frame_feat[t * self.feature_dim..(t + 1) * self.feature_dim]
    }

    pub fn obj_row(&self, t: usize, i: usize) -> &[f32] {
        let start = (t * self.num_objects + i) * self.feature_dim;
        &self.obj_feat[start..start + self.feature_dim]
    }

    pub fn bbox(&self, t: usize, i: usize) -> [f32; 4] {
        let s = (t * self.num_objects + i) * 4;
        [
            self.boxes[s],
            self.boxes[s + 1],
            self.boxes[s + 2],
            self.boxes[s + 3],
        ]
    }

    pub fn score(&self, t: usize, i: usize) -> f32 {
        self.scores[t * self.num_objects + i]
    }

    pub fn depth(&self, t: usize, i: usize) -> f32 {
        self.obj_depth[t * self.num_objects + i]
    }

    pub fn present(&self, t: usize, i: usize) -> bool {
        self.score(t, i) > 0.0
    }

    /// The first `len` frames as a standalone bundle.
    pub fn prefix(&self, len: usize) -> FeatureBundle {
        let len = len.min(self.num_frames);
        let n = self.num_objects;
        let f = self.feature_dim;
        FeatureBundle {
            num_frames: len,
            num_objects: n,
            feature_dim: f,
            width: self.width,
            height: self.height,
            frame_feat: self.frame_feat[..len * f].to_vec(),
            obj_feat: self.obj_feat[..len * n * f].to_vec(),
            boxes: self.boxes[..len * n * 4].to_vec(),
            scores: self.scores[..len * n].to_vec(),
            obj_depth: self.obj_depth[..len * n].to_vec(),
        }
    }

    /// Serialized size in bytes, excluding the fixed 12-byte preamble and header.
    pub fn payload_len(&self) -> usize {
        4 * self.expected_lens().iter().sum::<usize>()
    }
}

pub fn encode_bundle(bundle: &FeatureBundle) -> Result<Vec<u8>> {
    bundle.check_shapes()?;
    for (name, arr) in ARRAY_NAMES.iter().zip(bundle.arrays()) {
        if let Some(pos) = arr.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("{name}[{pos}]")));
        }
    }
    let header = serde_json::to_vec(&bundle.header())?;
    let mut out = Vec::with_capacity(12 + header.len() + bundle.payload_len());
    out.extend_from_slice(BUNDLE_MAGIC);
    out.extend_from_slice(&BUNDLE_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    for arr in bundle.arrays() {
        for v in arr {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_bundle(bytes: &[u8]) -> Result<FeatureBundle> {
    if bytes.len() < 12 {
        return Err(Error::Format("file shorter than preamble".into()));
    }
    if &bytes[..4] != BUNDLE_MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != BUNDLE_VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let header_end = 12usize
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::Format("truncated header".into()))?;
    let header: BundleHeader = serde_json::from_slice(&bytes[12..header_end])
        .map_err(|e| Error::Format(format!("bad header: {e}")))?;
    if header.dtype != "f32le" {
        return Err(Error::Format(format!("unsupported dtype {}", header.dtype)));
    }
    if header.arrays != ARRAY_NAMES {
        return Err(Error::Format(format!(
            "unexpected array list {:?}",
            header.arrays
        )));
    }
    let mut bundle = FeatureBundle::zeros(
        header.num_frames,
        header.num_objects,
        header.feature_dim,
        header.width,
        header.height,
    );
    let payload = &bytes[header_end..];
    if payload.len() != bundle.payload_len() {
        return Err(Error::Format(format!(
            "payload is {} bytes, header implies {}",
            payload.len(),
            bundle.payload_len()
        )));
    }
    let mut cursor = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()));
    for arr in [
        &mut bundle.frame_feat,
        &mut bundle.obj_feat,
        &mut bundle.boxes,
        &mut bundle.scores,
        &mut bundle.obj_depth,
    ] {
        for v in arr.iter_mut() {
            *v = cursor.next().expect("length checked above");
        }
    }
    Ok(bundle)
}

pub fn write_bundle(bundle: &FeatureBundle, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_bundle(bundle)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_bundle(path: impl AsRef<Path>) -> Result<FeatureBundle> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_bundle(&bytes)
}
