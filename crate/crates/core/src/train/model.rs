use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::checkpoint::{Checkpoint, ModelHeader, Provenance};
use crate::data::{multi_res_batches, BatchSpec, MultiResBatch, SampleLoader, SampleRecord};
use crate::error::{Error, Result};
use crate::fusion::{batch_features, FusionModel};
use crate::graph::{BnMode, Graph};
use crate::metrics::MetricsReport;
use crate::network::{Binder, BnContext, NetStructure};
use crate::params::{BnStore, ParamStore};
use crate::tensor::Tensor;

/// Anything that maps aligned multi-resolution batches to probabilities.
pub trait Scorer {
    /// Input resolutions the model consumes, ascending.
    fn resolutions(&self) -> Vec<usize>;

    /// Probability of the positive class per sample, in batch order.
    fn score(&self, batch: &MultiResBatch) -> Result<Vec<f64>>;
}

/// A single DilationNet with its parameters and running moments.
#[derive(Clone, Debug, PartialEq)]
pub struct DilationNetModel {
    pub structure: NetStructure,
    pub params: ParamStore,
    pub bn: BnStore,
}

impl DilationNetModel {
    pub fn init(structure: NetStructure, seed: u64) -> Self {
        let (params, bn) = structure.init_params(&mut ChaCha8Rng::seed_from_u64(seed));
        Self { structure, params, bn }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let Some(structure) = ckpt.structure() else {
            return Err(Error::Checkpoint("expected a single-network checkpoint, found a fusion checkpoint".into()));
        };
        ckpt.validate()?;
        Ok(Self { structure: structure.clone(), params: ckpt.params.clone(), bn: ckpt.bn.clone() })
    }

    pub fn to_checkpoint(&self, provenance: Provenance) -> Checkpoint {
        Checkpoint::dilation_net(&self.structure, self.params.clone(), self.bn.clone(), provenance)
    }

    /// Inference forward pass on `(n, r, r, 3)` images to `(n, 1)` probabilities.
    pub fn predict(&self, images: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let x = g.input(images.clone());
        let mut bn = self.bn.clone();
        let mut ctx = BnContext::new(&mut bn, BnMode::Infer);
        let y = self.structure.forward(&mut g, x, Binder::frozen(&self.params), &mut ctx)?;
        Ok(g.value(y).clone())
    }
}

impl Scorer for DilationNetModel {
    fn resolutions(&self) -> Vec<usize> {
        vec![self.structure.resolution]
    }

    fn score(&self, batch: &MultiResBatch) -> Result<Vec<f64>> {
        let p = self.predict(batch.at(self.structure.resolution)?)?;
        Ok(p.data().iter().map(|&v| v as f64).collect())
    }
}

impl FusionModel {
    pub fn predict(&self, batch: &MultiResBatch) -> Result<Tensor> {
        let features = batch_features(&batch.streams(), &self.backbones)?;
        self.predict_features(&features)
    }

    /// Head forward pass on precomputed concatenated features.
    pub fn predict_features(&self, features: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let f = g.input(features.clone());
        let y = self.head().forward(&mut g, f, Binder::frozen(&self.head_params))?;
        Ok(g.value(y).clone())
    }
}

impl Scorer for FusionModel {
    fn resolutions(&self) -> Vec<usize> {
        let mut r: Vec<usize> = self.backbones.iter().map(|b| b.resolution).collect();
        r.sort_unstable();
        r
    }

    fn score(&self, batch: &MultiResBatch) -> Result<Vec<f64>> {
        Ok(self.predict(batch)?.data().iter().map(|&v| v as f64).collect())
    }
}

/// Reconstruct whichever model a checkpoint holds.
pub fn load_scorer(ckpt: &Checkpoint) -> Result<Box<dyn Scorer>> {
    Ok(match &ckpt.model {
        ModelHeader::DilationNet { .. } => Box::new(DilationNetModel::from_checkpoint(ckpt)?),
        ModelHeader::Fusion(_) => Box::new(FusionModel::from_checkpoint(ckpt)?),
    })
}

/// Scores, labels and ids over `records`, in record order.
pub struct Scored {
    pub ids: Vec<String>,
    pub scores: Vec<f64>,
    pub labels: Vec<u8>,
}

pub fn score_records(
    model: &dyn Scorer,
    loader: &mut SampleLoader,
    records: &[&SampleRecord],
    batch_size: usize,
) -> Result<Scored> {
    let spec = BatchSpec {
        batch_size,
        resolutions: model.resolutions(),
        augmentation: None,
        seed: 0,
        shuffle: false,
    };
    let mut out = Scored { ids: Vec::new(), scores: Vec::new(), labels: Vec::new() };
    for batch in multi_res_batches(loader, records, spec)? {
        let batch = batch?;
        out.scores.extend(model.score(&batch)?);
        out.labels.extend(batch.labels.data().iter().map(|&y| y as u8));
        out.ids.extend(batch.ids);
    }
    Ok(out)
}

pub fn evaluate(
    model: &dyn Scorer,
    loader: &mut SampleLoader,
    records: &[&SampleRecord],
    batch_size: usize,
    threshold: f64,
) -> Result<MetricsReport> {
    let s = score_records(model, loader, records, batch_size)?;
    MetricsReport::from_scores(&s.scores, &s.labels, threshold)
}
