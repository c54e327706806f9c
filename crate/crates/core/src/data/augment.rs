//! Scene-factor statistics, prompt sampling and generated-negative mixing.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{DatasetManifest, Label, VideoSample};
use crate::error::{Error, Result};

/// Per factor name, the proportion of each category.
pub type FactorDistribution = BTreeMap<String, BTreeMap<String, f64>>;

pub fn factor_distribution(manifest: &DatasetManifest, split: &str) -> Result<FactorDistribution> {
    let samples = manifest.split(split)?;
    if samples.is_empty() {
        return Err(Error::Invalid(format!("split {split} is empty")));
    }
    let mut keys: BTreeSet<&str> = BTreeSet::new();
    for s in &samples {
        let factors = s
            .factors
            .as_ref()
            .ok_or_else(|| Error::Invalid(format!("sample {} has no factor annotations", s.id)))?;
        keys.extend(factors.keys().map(String::as_str));
    }
    let mut counts: BTreeMap<String, BTreeMap<String, usize>> = BTreeMap::new();
    for s in &samples {
        let factors = s.factors.as_ref().expect("checked above");
        for key in &keys {
            let category = factors.get(*key).ok_or_else(|| {
                Error::Invalid(format!("sample {} is missing factor {key}", s.id))
            })?;
            *counts
                .entry(key.to_string())
                .or_default()
                .entry(category.clone())
                .or_default() += 1;
        }
    }
    let n = samples.len() as f64;
    Ok(counts
        .into_iter()
        .map(|(k, cats)| {
            (
                k,
                cats.into_iter().map(|(c, m)| (c, m as f64 / n)).collect(),
            )
        })
        .collect())
}

/// Draws `n` factor maps, each factor independently from its categorical
/// distribution. Pure in `(dist, n, seed)`.
pub fn sample_factor_prompts(
    dist: &FactorDistribution,
    n: usize,
    seed: u64,
) -> Result<Vec<BTreeMap<String, String>>> {
    if n == 0 {
        return Err(Error::Invalid("n must be >= 1".into()));
    }
    if dist.is_empty() || dist.values().any(BTreeMap::is_empty) {
        return Err(Error::Invalid("empty factor distribution".into()));
    }
    for (factor, cats) in dist {
        let total: f64 = cats.values().sum();
        if cats.values().any(|p| !(0.0..=1.0).contains(p)) || (total - 1.0).abs() > 1e-9 {
            return Err(Error::Invalid(format!(
                "factor {factor}: proportions must sum to 1"
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let mut prompt = BTreeMap::new();
        for (factor, cats) in dist {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut pick = cats.keys().next_back().expect("non-empty");
            for (cat, p) in cats {
                acc += p;
                if u < acc {
                    pick = cat;
                    break;
                }
            }
            prompt.insert(factor.clone(), pick.clone());
        }
        out.push(prompt);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MixMode {
    /// Append generated negatives to the training split.
    Add,
    /// Swap out the same number of original training negatives.
    Replace,
}

/// `floor(ratio * negatives)`, tolerant to representation error in `ratio`.
pub fn mix_count(ratio: f64, negatives: usize) -> usize {
    (ratio * negatives as f64 + 1e-9).floor() as usize
}

/// Mixes generated negatives into the training split. The count is
/// `floor(ratio * #train negatives)`; the test split is never touched.
pub fn mix_augment(
    manifest: &DatasetManifest,
    generated: &[VideoSample],
    ratio: f64,
    seed: u64,
    mode: MixMode,
) -> Result<DatasetManifest> {
    if !(ratio >= 0.0 && ratio.is_finite()) {
        return Err(Error::Invalid(format!("ratio must be >= 0, got {ratio}")));
    }
    manifest.check()?;
    if let Some(s) = generated.iter().find(|s| s.label != Label::Negative) {
        return Err(Error::Invalid(format!(
            "generated sample {} is not negative",
            s.id
        )));
    }
    let existing: BTreeSet<&str> = manifest.samples.iter().map(|s| s.id.as_str()).collect();
    let mut gen_ids = BTreeSet::new();
    for s in generated {
        if existing.contains(s.id.as_str()) || !gen_ids.insert(s.id.as_str()) {
            return Err(Error::Invalid(format!(
                "generated id {} is not unique",
                s.id
            )));
        }
    }

    let train = manifest.split("train")?;
    let train_negatives: Vec<&str> = train
        .iter()
        .filter(|s| s.label == Label::Negative)
        .map(|s| s.id.as_str())
        .collect();
    let count = mix_count(ratio, train_negatives.len());
    if count == 0 {
        return Ok(manifest.clone());
    }
    if generated.len() < count {
        return Err(Error::Invalid(format!(
            "generated pool has {} samples, {count} required",
            generated.len()
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picked = index::sample(&mut rng, generated.len(), count);
    let removed: BTreeSet<&str> = match mode {
        MixMode::Add => BTreeSet::new(),
        MixMode::Replace => index::sample(&mut rng, train_negatives.len(), count)
            .into_iter()
            .map(|i| train_negatives[i])
            .collect(),
    };

    let mut out = manifest.clone();
    out.samples.retain(|s| !removed.contains(s.id.as_str()));
    let train_ids = out
        .splits
        .get_mut("train")
        .expect("train split resolved above");
    train_ids.retain(|id| !removed.contains(id.as_str()));
    for i in picked {
        let s = &generated[i];
        train_ids.push(s.id.clone());
        out.samples.push(s.clone());
    }
    out.check()?;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Quartiles {
    pub count: usize,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

impl Quartiles {
    fn of(values: &mut [f64]) -> Quartiles {
        values.sort_by(f64::total_cmp);
        let at = |p: f64| {
            let pos = p * (values.len() - 1) as f64;
            let lo = pos.floor() as usize;
            let hi = pos.ceil() as usize;
            values[lo] + (values[hi] - values[lo]) * (pos - lo as f64)
        };
        Quartiles {
            count: values.len(),
            min: values[0],
            q1: at(0.25),
            median: at(0.5),
            q3: at(0.75),
            max: values[values.len() - 1],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StartFrameStats {
    /// toa → number of positive videos.
    pub histogram: BTreeMap<i64, usize>,
    pub overall: Quartiles,
    /// Per accident type, when samples carry a type annotation.
    pub by_type: BTreeMap<String, Quartiles>,
}

pub fn start_frame_stats(manifest: &DatasetManifest) -> Result<StartFrameStats> {
    let positives: Vec<&VideoSample> = manifest
        .samples
        .iter()
        .filter(|s| s.label == Label::Positive)
        .collect();
    if positives.is_empty() {
        return Err(Error::Invalid("manifest has no positive samples".into()));
    }
    let mut histogram = BTreeMap::new();
    let mut all = Vec::with_capacity(positives.len());
    let mut typed: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for s in &positives {
        *histogram.entry(s.toa).or_insert(0) += 1;
        all.push(s.toa as f64);
        if let Some(kind) = &s.accident_type {
            typed.entry(kind.clone()).or_default().push(s.toa as f64);
        }
    }
    Ok(StartFrameStats {
        histogram,
        overall: Quartiles::of(&mut all),
        by_type: typed
            .into_iter()
            .map(|(k, mut v)| (k, Quartiles::of(&mut v)))
            .collect(),
    })
}
