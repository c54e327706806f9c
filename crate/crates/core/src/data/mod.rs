//! Dataset manifest, per-video feature bundles and augmentation bookkeeping.

mod augment;
mod bundle;
mod validate;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use augment::{
    factor_distribution, mix_augment, mix_count, sample_factor_prompts, start_frame_stats,
    FactorDistribution, MixMode, Quartiles, StartFrameStats,
};
pub use bundle::{
    decode_bundle, encode_bundle, read_bundle, write_bundle, BundleHeader, FeatureBundle,
    BUNDLE_MAGIC, BUNDLE_VERSION,
};
pub use validate::validate_sample;

/// Number of object slots kept per frame.
pub const OBJECT_SLOTS: usize = 19;

/// Sentinel time-of-accident for negative videos.
pub const NO_ACCIDENT: i64 = -1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Positive,
    Negative,
}

impl Label {
    pub fn is_positive(self) -> bool {
        matches!(self, Label::Positive)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoSample {
    pub id: String,
    pub label: Label,
    /// Accident frame index; [`NO_ACCIDENT`] for negatives.
    pub toa: i64,
    pub fps: u32,
    pub num_frames: usize,
    pub bundle_path: String,
    #[serde(default)]
    pub factors: Option<BTreeMap<String, String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accident_type: Option<String>,
}

impl VideoSample {
    /// Checks the label/toa/fps/length invariants of a single sample.
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.fps < 1 {
            out.push("fps must be >= 1".to_string());
        }
        if self.num_frames < 2 {
            out.push("num_frames must be >= 2".to_string());
        }
        match self.label {
            Label::Positive => {
                if self.toa <= 0 || self.toa >= self.num_frames as i64 {
                    out.push(format!(
                        "toa out of range: {} not in (0, {})",
                        self.toa, self.num_frames
                    ));
                }
            }
            Label::Negative => {
                if self.toa != NO_ACCIDENT {
                    out.push(format!(
                        "negative sample must have toa = -1, got {}",
                        self.toa
                    ));
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub samples: Vec<VideoSample>,
    pub splits: BTreeMap<String, Vec<String>>,
}

impl DatasetManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let manifest: DatasetManifest = serde_json::from_str(&text)?;
        manifest.check()?;
        Ok(manifest)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Verifies that ids are unique, split ids resolve, and train/test are disjoint.
    pub fn check(&self) -> Result<()> {
        let mut ids = BTreeSet::new();
        for s in &self.samples {
            if !ids.insert(s.id.as_str()) {
                return Err(Error::Invalid(format!("duplicate sample id {}", s.id)));
            }
        }
        for (split, members) in &self.splits {
            let mut seen = BTreeSet::new();
            for id in members {
                if !ids.contains(id.as_str()) {
                    return Err(Error::Invalid(format!("split {split}: unknown id {id}")));
                }
                if !seen.insert(id.as_str()) {
                    return Err(Error::Invalid(format!(
                        "split {split}: id {id} listed twice"
                    )));
                }
            }
        }
        if let (Some(train), Some(test)) = (self.splits.get("train"), self.splits.get("test")) {
            let train: BTreeSet<&str> = train.iter().map(String::as_str).collect();
            if let Some(id) = test.iter().find(|id| train.contains(id.as_str())) {
                return Err(Error::Invalid(format!("id {id} is in both train and test")));
            }
        }
        Ok(())
    }

    pub fn sample(&self, id: &str) -> Option<&VideoSample> {
        self.samples.iter().find(|s| s.id == id)
    }

    /// Samples of a split, in split order.
    pub fn split(&self, name: &str) -> Result<Vec<&VideoSample>> {
        let ids = self
            .splits
            .get(name)
            .ok_or_else(|| Error::Invalid(format!("unknown split {name}")))?;
        let index: BTreeMap<&str, &VideoSample> =
            self.samples.iter().map(|s| (s.id.as_str(), s)).collect();
        ids.iter()
            .map(|id| {
                index
                    .get(id.as_str())
                    .copied()
                    .ok_or_else(|| Error::Invalid(format!("split {name}: unknown id {id}")))
            })
            .collect()
    }

    /// Resolves a sample's bundle path relative to the manifest location.
    pub fn bundle_path(manifest_path: &Path, sample: &VideoSample) -> std::path::PathBuf {
        let p = Path::new(&sample.bundle_path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            manifest_path
                .parent()
                .unwrap_or_else(|| Path::new("."))
                .join(p)
        }
    }
}
