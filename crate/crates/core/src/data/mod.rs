//! Dataset manifests, partitioning, preprocessing and batching.
//!
//! Sampling is always stratified: records are ordered so that classes are
//! interleaved in proportion to their size, and every subset (train split,
//! validation hold-out, data fraction) is a prefix of such an ordering. A
//! prefix keeps each class within one sample of its proportional share, and
//! prefixes of one ordering are nested by construction.

pub mod batch;
pub mod image;
pub mod scan;
pub mod synth;

use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub use self::batch::{multi_res_batches, BatchSpec, MultiResBatch, SampleLoader};
pub use self::image::{augment, normalize, resample, AugmentationConfig};
pub use self::scan::{scan_dataset, ScanReport};
pub use self::synth::{synth_dataset, synth_image, synth_manifest, InMemoryDataset};

pub const LABEL_PARASITIZED: u8 = 1;
pub const LABEL_UNINFECTED: u8 = 0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Unassigned,
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SampleSource {
    Path(PathBuf),
    Synthetic { seed: u64 },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    pub source: SampleSource,
    pub label: u8,
    pub height: usize,
    pub width: usize,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub records: Vec<SampleRecord>,
    pub seed: Option<u64>,
    pub split_ratio: Option<f64>,
    /// Fraction of the training partition kept, when reduced by [`fraction`].
    pub fraction: Option<f64>,
}

impl DatasetManifest {
    pub fn new(records: Vec<SampleRecord>) -> Self {
        Self { records, seed: None, split_ratio: None, fraction: None }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// `[uninfected, parasitized]` counts.
    pub fn class_counts(&self) -> [usize; 2] {
        count_classes(self.records.iter())
    }

    pub fn partition(&self, split: Split) -> Vec<&SampleRecord> {
        self.records.iter().filter(|r| r.split == split).collect()
    }

    pub fn partition_counts(&self, split: Split) -> [usize; 2] {
        count_classes(self.records.iter().filter(|r| r.split == split))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let m: Self = serde_json::from_str(s)?;
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let mut ids = std::collections::HashSet::new();
        for r in &self.records {
            if r.label > 1 {
                return Err(Error::InvalidArgument(format!("record {} has label {}", r.id, r.label)));
            }
            if !ids.insert(&r.id) {
                return Err(Error::InvalidArgument(format!("duplicate sample id {}", r.id)));
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn checksum(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("manifest serializes")))
    }
}

fn count_classes<'a>(it: impl Iterator<Item = &'a SampleRecord>) -> [usize; 2] {
    let mut c = [0, 0];
    for r in it {
        c[r.label as usize] += 1;
    }
    c
}

/// Indices of `labels` in a seeded order that interleaves the classes
/// proportionally: within each class the order is a seeded shuffle, and the
/// `i`-th member of a class of size `n` is placed at key `(i + ½)/n`.
pub fn stratified_order(labels: &[u8], seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keyed: Vec<(f64, u8, usize)> = Vec::with_capacity(labels.len());
    for class in [0u8, 1] {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        members.shuffle(&mut rng);
        let n = members.len() as f64;
        keyed.extend(members.into_iter().enumerate().map(|(rank, idx)| ((rank as f64 + 0.5) / n, class, idx)));
    }
    keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    keyed.into_iter().map(|(_, _, idx)| idx).collect()
}

/// Assign `round(ratio·N)` records to train and the rest to test, stratified
/// by class and reproducible for a fixed seed.
pub fn split(manifest: &DatasetManifest, ratio: f64, seed: u64) -> Result<DatasetManifest> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::InvalidArgument(format!("split ratio {ratio} must lie in (0, 1)")));
    }
    let labels: Vec<u8> = manifest.records.iter().map(|r| r.label).collect();
    let n_train = (ratio * labels.len() as f64).round() as usize;
    let order = stratified_order(&labels, seed);
    let mut out = manifest.clone();
    for r in &mut out.records {
        r.split = Split::Test;
    }
    for &i in &order[..n_train] {
        out.records[i].split = Split::Train;
    }
    out.seed = Some(seed);
    out.split_ratio = Some(ratio);
    out.fraction = None;
    Ok(out)
}

/// Keep a stratified `round(p·|train|)` subset of the training partition;
/// the test partition is untouched. For a fixed seed, the subset at a
/// smaller `p` is contained in the subset at any larger `p`.
pub fn fraction(manifest: &DatasetManifest, p: f64, seed: u64) -> Result<DatasetManifest> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::InvalidArgument(format!("fraction {p} must lie in (0, 1]")));
    }
    let train: Vec<usize> = (0..manifest.records.len())
        .filter(|&i| manifest.records[i].split == Split::Train)
        .collect();
    let labels: Vec<u8> = train.iter().map(|&i| manifest.records[i].label).collect();
    let keep_n = (p * train.len() as f64).round() as usize;
    let order = stratified_order(&labels, seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut keep = vec![false; manifest.records.len()];
    for &k in &order[..keep_n] {
        keep[train[k]] = true;
    }
    let records = manifest
        .records
        .iter()
        .enumerate()
        .filter(|(i, r)| r.split != Split::Train || keep[*i])
        .map(|(_, r)| r.clone())
        .collect();
    Ok(DatasetManifest {
        records,
        seed: manifest.seed,
        split_ratio: manifest.split_ratio,
        fraction: Some(p),
    })
}

/// Split training records into `(fit, validation)` with a stratified
/// `round(holdout·N)` validation set.
pub fn holdout<'a>(
    records: &[&'a SampleRecord],
    holdout: f64,
    seed: u64,
) -> (Vec<&'a SampleRecord>, Vec<&'a SampleRecord>) {
    let labels: Vec<u8> = records.iter().map(|r| r.label).collect();
    let n_val = (holdout * records.len() as f64).round() as usize;
    let order = stratified_order(&labels, seed ^ 0x5851_f42d_4c95_7f2d);
    let mut is_val = vec![false; records.len()];
    for &i in &order[..n_val] {
        is_val[i] = true;
    }
    let (mut fit, mut val) = (Vec::new(), Vec::new());
    for (i, r) in records.iter().enumerate() {
        if is_val[i] {
            val.push(*r);
        } else {
            fit.push(*r);
        }
    }
    (fit, val)
}

/// SplitMix64 finalizer, used to derive independent per-sample seeds.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(0x6a09_e667_f3bc_c909);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn manifest(n: usize) -> DatasetManifest {
        synth_manifest(n, 3)
    }

    #[test]
    fn split_ten_gives_eight_two() {
        let m = split(&manifest(10), 0.8, 1).unwrap();
        assert_eq!(m.partition(Split::Train).len(), 8);
        assert_eq!(m.partition(Split::Test).len(), 2);
    }

    #[test]
    fn split_is_reproducible() {
        let a = split(&manifest(50), 0.8, 9).unwrap();
        let b = split(&manifest(50), 0.8, 9).unwrap();
        assert_eq!(a, b);
        let c = split(&manifest(50), 0.8, 10).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn split_rejects_bad_ratio() {
        assert!(split(&manifest(4), 0.0, 1).is_err());
        assert!(split(&manifest(4), 1.0, 1).is_err());
    }

    #[test]
    fn fraction_bounds_and_identity() {
        let m = split(&manifest(40), 0.8, 2).unwrap();
        assert!(fraction(&m, 0.0, 1).is_err());
        assert!(fraction(&m, 1.5, 1).is_err());
        let full = fraction(&m, 1.0, 1).unwrap();
        assert_eq!(full.records, m.records);
        let tenth = fraction(&m, 0.1, 1).unwrap();
        assert_eq!(tenth.partition(Split::Train).len(), 3);
        assert_eq!(tenth.partition(Split::Test), m.partition(Split::Test));
    }

    #[test]
    fn mix_seed_spreads() {
        assert_ne!(mix_seed(1, 2), mix_seed(2, 1));
        assert_ne!(mix_seed(0, 0), mix_seed(0, 1));
    }
}
