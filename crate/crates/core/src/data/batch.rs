use std::collections::{BTreeMap, HashMap};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::image::{augment, normalize_rgb, resample, AugmentationConfig};
use super::synth::synth_image;
use super::{mix_seed, SampleRecord, SampleSource};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Decodes samples to normalized native-resolution tensors, optionally
/// keeping them in memory.
#[derive(Default)]
pub struct SampleLoader {
    cache: Option<HashMap<String, Tensor>>,
}

impl SampleLoader {
    pub fn cached() -> Self {
        Self { cache: Some(HashMap::new()) }
    }

    pub fn uncached() -> Self {
        Self { cache: None }
    }

    pub fn load(&mut self, record: &SampleRecord) -> Result<Tensor> {
        if let Some(t) = self.cache.as_ref().and_then(|c| c.get(&record.id)) {
            return Ok(t.clone());
        }
        let t = match &record.source {
            SampleSource::Synthetic { seed } => synth_image(*seed, record.label),
            SampleSource::Path(p) => {
                let img = ::image::open(p).map_err(|e| Error::Image { path: p.clone(), message: e.to_string() })?;
                normalize_rgb(&img.to_rgb8())
            }
        };
        if let Some(c) = self.cache.as_mut() {
            c.insert(record.id.clone(), t.clone());
        }
        Ok(t)
    }

    /// Native sample, augmented when `augmentation` is given, then resampled
    /// to every requested resolution. Augmentation happens once, before
    /// resampling, so all resolutions show the same content.
    pub fn prepare(
        &mut self,
        record: &SampleRecord,
        resolutions: &[usize],
        augmentation: Option<(&AugmentationConfig, u64)>,
    ) -> Result<Vec<Tensor>> {
        let mut native = self.load(record)?;
        if let Some((cfg, seed)) = augmentation {
            native = augment(&native, cfg, mix_seed(seed, id_hash(&record.id)))?;
        }
        resolutions.iter().map(|&r| resample(&native, r)).collect()
    }
}

pub fn id_hash(id: &str) -> u64 {
    // FNV-1a
    id.bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchSpec {
    pub batch_size: usize,
    pub resolutions: Vec<usize>,
    pub augmentation: Option<AugmentationConfig>,
    /// Drives the shuffle and the per-sample augmentation draws.
    pub seed: u64,
    pub shuffle: bool,
}

/// One batch of the same samples at several resolutions.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiResBatch {
    pub ids: Vec<String>,
    /// `(n, 1)` labels in `{0, 1}`.
    pub labels: Tensor,
    /// `(n, r, r, 3)` per resolution.
    pub images: BTreeMap<usize, Tensor>,
}

impl MultiResBatch {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn at(&self, r: usize) -> Result<&Tensor> {
        self.images
            .get(&r)
            .ok_or_else(|| Error::InvalidArgument(format!("batch has no {r}x{r} stream")))
    }
}

pub struct BatchStream<'a> {
    loader: &'a mut SampleLoader,
    records: Vec<&'a SampleRecord>,
    spec: BatchSpec,
    cursor: usize,
}

/// Lazily assemble aligned batches over `records`. Every stream of a batch
/// holds the same samples in the same order; there are
/// `ceil(N / batch_size)` batches.
pub fn multi_res_batches<'a>(
    loader: &'a mut SampleLoader,
    records: &[&'a SampleRecord],
    spec: BatchSpec,
) -> Result<BatchStream<'a>> {
    if spec.batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be >= 1".into()));
    }
    let mut order: Vec<&SampleRecord> = records.to_vec();
    if spec.shuffle {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
    }
    Ok(BatchStream { loader, records: order, spec, cursor: 0 })
}

impl BatchStream<'_> {
    pub fn batch_count(&self) -> usize {
        self.records.len().div_ceil(self.spec.batch_size)
    }

    fn assemble(&mut self, chunk: &[&SampleRecord]) -> Result<MultiResBatch> {
        let res = &self.spec.resolutions;
        let mut per_res: Vec<Vec<Tensor>> = vec![Vec::with_capacity(chunk.len()); res.len()];
        for rec in chunk {
            let aug = self.spec.augmentation.as_ref().map(|c| (c, self.spec.seed));
            for (slot, t) in per_res.iter_mut().zip(self.loader.prepare(rec, res, aug)?) {
                let s = t.shape().to_vec();
                slot.push(t.reshape(&[1, s[0], s[1], s[2]])?);
            }
        }
        let mut images = BTreeMap::new();
        for (&r, parts) in res.iter().zip(per_res) {
            images.insert(r, Tensor::stack_batch(&parts)?);
        }
        Ok(MultiResBatch {
            ids: chunk.iter().map(|r| r.id.clone()).collect(),
            labels: Tensor::new(vec![chunk.len(), 1], chunk.iter().map(|r| r.label as f32).collect())?,
            images,
        })
    }
}

impl Iterator for BatchStream<'_> {
    type Item = Result<MultiResBatch>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.cursor >= self.records.len() {
            return None;
        }
        let end = (self.cursor + self.spec.batch_size).min(self.records.len());
        let chunk: Vec<&SampleRecord> = self.records[self.cursor..end].to_vec();
        self.cursor = end;
        Some(self.assemble(&chunk))
    }
}
