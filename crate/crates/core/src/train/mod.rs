//! Loss, optimizer, checkpoints and the two training stages.
//!
//! Stage 1 trains one DilationNet end to end. Stage 2 trains only the fusion
//! head over frozen backbones; when augmentation is off the backbone features
//! are computed once and reused every epoch, which is exact because frozen
//! backbones run batch norm on stored statistics.

pub mod adam;
pub mod checkpoint;
pub mod loss;
mod model;
mod trace;

use std::collections::{BTreeMap, HashMap};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use adam::{adam_step, OptimizerState};
pub use checkpoint::{Checkpoint, Provenance};
pub use loss::{bce_l2_loss, LossParts};
pub use model::{evaluate, load_scorer, score_records, DilationNetModel, Scored, Scorer};
pub use trace::{EpochRecord, Trace, TRACE_HEADER};

use crate::data::{holdout, mix_seed, multi_res_batches, AugmentationConfig, BatchSpec, DatasetManifest, SampleLoader, SampleRecord, Split};
use crate::error::{Error, Result};
use crate::fusion::{batch_features, FrozenBackbone, FusionModel, FusionSpec};
use crate::graph::{BnMode, Graph, Var};
use crate::network::{build_dilation_net, is_decayed_weight, Binder, BnContext, Variant};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f32,
    /// L2 coefficient λ.
    pub weight_decay: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub epsilon: f32,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Stop after this many epochs without a better validation result.
    pub patience: Option<usize>,
    /// Share of the training partition held out for the per-epoch validation.
    pub validation_fraction: f64,
    pub augmentation: Option<AugmentationConfig>,
    /// After each stage-1 epoch, replace the batch-norm running moments by
    /// the mean batch moments of the unaugmented fit set under the current
    /// parameters. Without it the moving averages trail the weights, which
    /// badly skews inference on short or small runs.
    pub bn_refresh: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.99,
            epsilon: 1e-8,
            batch_size: 32,
            epochs: 30,
            seed: 0,
            patience: None,
            validation_fraction: 0.1,
            augmentation: Some(AugmentationConfig::default()),
            bn_refresh: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_owned()));
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad("learning rate must be > 0");
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad("L2 coefficient must be >= 0");
        }
        if !(0.0 < self.beta1 && self.beta1 < self.beta2 && self.beta2 < 1.0) {
            return bad("Adam betas must satisfy 0 < beta1 < beta2 < 1");
        }
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return bad("epsilon must be > 0");
        }
        if self.batch_size == 0 {
            return bad("batch size must be >= 1");
        }
        if self.patience == Some(0) {
            return bad("patience must be >= 1");
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return bad("validation fraction must be in [0, 1)");
        }
        Ok(())
    }
}

/// Trained model, its best-validation checkpoint and the epoch trace.
#[derive(Clone, Debug)]
pub struct TrainOutcome<M> {
    pub model: M,
    pub checkpoint: Checkpoint,
    pub trace: Trace,
    pub best_epoch: Option<usize>,
}

#[derive(Clone, Copy, Debug, Default)]
struct EpochStats {
    loss_sum: f64,
    correct: usize,
    n: usize,
}

impl EpochStats {
    fn add(&mut self, loss: f32, pred: &Tensor, labels: &Tensor) {
        let n = labels.numel();
        self.loss_sum += loss as f64 * n as f64;
        self.n += n;
        self.correct += pred
            .data()
            .iter()
            .zip(labels.data())
            .filter(|(&p, &y)| (p >= 0.5) == (y == 1.0))
            .count();
    }

    fn mean_loss(&self) -> f64 {
        self.loss_sum / self.n.max(1) as f64
    }

    fn accuracy(&self) -> f64 {
        self.correct as f64 / self.n.max(1) as f64
    }
}

trait Session {
    fn train_epoch(&mut self, epoch: usize) -> Result<EpochStats>;
    fn validate(&mut self) -> Result<Option<EpochStats>>;
    /// Remember the current parameters as the selected model.
    fn keep_current(&mut self);
}

fn better(candidate: &EpochRecord, best: &EpochRecord) -> bool {
    match (candidate.val_acc, best.val_acc, candidate.val_loss, best.val_loss) {
        (Some(a), Some(b), Some(la), Some(lb)) => a > b || (a == b && la < lb),
        _ => true,
    }
}

fn drive(
    session: &mut dyn Session,
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochRecord) -> Result<()>,
) -> Result<(Trace, Option<usize>)> {
    let mut trace = Trace::default();
    let mut best: Option<EpochRecord> = None;
    let mut since_best = 0;
    for epoch in 1..=cfg.epochs {
        let train = session.train_epoch(epoch)?;
        let val = session.validate()?;
        let rec = EpochRecord {
            epoch,
            train_loss: train.mean_loss(),
            train_acc: train.accuracy(),
            val_loss: val.map(|v| v.mean_loss()),
            val_acc: val.map(|v| v.accuracy()),
        };
        on_epoch(&rec)?;
        if best.as_ref().is_none_or(|b| better(&rec, b)) {
            session.keep_current();
            best = Some(rec.clone());
            since_best = 0;
        } else {
            since_best += 1;
        }
        trace.epochs.push(rec);
        if cfg.patience.is_some_and(|p| since_best >= p) {
            break;
        }
    }
    Ok((trace, best.map(|b| b.epoch)))
}

fn provenance(cfg: &TrainConfig, trace: &Trace, best_epoch: Option<usize>) -> Provenance {
    let mut final_metrics = std::collections::BTreeMap::new();
    if let Some(rec) = best_epoch.and_then(|e| trace.epochs.iter().find(|r| r.epoch == e)) {
        final_metrics.insert("train_loss".into(), rec.train_loss);
        final_metrics.insert("train_acc".into(), rec.train_acc);
        if let (Some(l), Some(a)) = (rec.val_loss, rec.val_acc) {
            final_metrics.insert("val_loss".into(), l);
            final_metrics.insert("val_acc".into(), a);
        }
    }
    Provenance { seed: cfg.seed, epochs: trace.len(), best_epoch, final_metrics }
}

fn decayed_weights(g: &Graph) -> Vec<Var> {
    g.params().into_iter().filter(|(n, _)| is_decayed_weight(n)).map(|(_, v)| v).collect()
}

fn check_finite(loss: f32, epoch: usize) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged { epoch, loss })
    }
}

fn split_training<'a>(manifest: &'a DatasetManifest, cfg: &TrainConfig) -> Result<(Vec<&'a SampleRecord>, Vec<&'a SampleRecord>)> {
    cfg.validate()?;
    let train = manifest.partition(Split::Train);
    let (fit, val) = holdout(&train, cfg.validation_fraction, cfg.seed);
    if fit.is_empty() {
        return Err(Error::Empty("training partition has no samples to fit".into()));
    }
    Ok((fit, val))
}

struct NetSession<'a, 'r> {
    model: DilationNetModel,
    best: DilationNetModel,
    opt: OptimizerState,
    loader: &'a mut SampleLoader,
    fit: Vec<&'r SampleRecord>,
    val: Vec<&'r SampleRecord>,
    cfg: &'a TrainConfig,
}

impl NetSession<'_, '_> {
    fn batches(&self, epoch: Option<usize>) -> BatchSpec {
        BatchSpec {
            batch_size: self.cfg.batch_size,
            resolutions: vec![self.model.structure.resolution],
            augmentation: epoch.and(self.cfg.augmentation.clone()),
            seed: epoch.map_or(0, |e| mix_seed(self.cfg.seed, e as u64)),
            shuffle: epoch.is_some(),
        }
    }
}

impl NetSession<'_, '_> {
    fn refresh_bn(&mut self) -> Result<()> {
        let mut acc = self.model.bn.clone();
        for (_, m) in acc.iter_mut() {
            m.mean.iter_mut().for_each(|v| *v = 0.0);
            m.var.iter_mut().for_each(|v| *v = 0.0);
        }
        let r = self.model.structure.resolution;
        let mut samples = 0usize;
        for batch in multi_res_batches(self.loader, &self.fit, self.batches(None))? {
            let batch = batch?;
            let mut g = Graph::new();
            let x = g.input(batch.at(r)?.clone());
            let mut ctx = BnContext::new(&mut acc, BnMode::Accumulate);
            self.model.structure.forward(&mut g, x, Binder::frozen(&self.model.params), &mut ctx)?;
            samples += batch.len();
        }
        let n = samples as f32;
        for (_, m) in acc.iter_mut() {
            m.mean.iter_mut().for_each(|v| *v /= n);
            m.var.iter_mut().for_each(|v| *v /= n);
        }
        self.model.bn = acc;
        Ok(())
    }
}

/// One forward pass of the network plus the loss, in the given batch-norm mode.
fn net_step(model: &mut DilationNetModel, images: &Tensor, labels: &Tensor, lambda: f32, mode: BnMode) -> Result<(Graph, LossParts, Var)> {
    let mut g = Graph::new();
    let x = g.input(images.clone());
    let mut ctx = BnContext::new(&mut model.bn, mode);
    let pred = model.structure.forward(&mut g, x, Binder::trainable(&model.params), &mut ctx)?;
    let weights = decayed_weights(&g);
    let parts = bce_l2_loss(&mut g, pred, labels, &weights, lambda)?;
    Ok((g, parts, pred))
}

impl Session for NetSession<'_, '_> {
    fn train_epoch(&mut self, epoch: usize) -> Result<EpochStats> {
        let mut stats = EpochStats::default();
        let spec = self.batches(Some(epoch));
        let r = self.model.structure.resolution;
        for batch in multi_res_batches(self.loader, &self.fit, spec)? {
            let batch = batch?;
            let (g, parts, pred) = net_step(&mut self.model, batch.at(r)?, &batch.labels, self.cfg.weight_decay, BnMode::Train)?;
            let loss = g.value(parts.total).item();
            check_finite(loss, epoch)?;
            let grads = g.backward(parts.total)?;
            adam_step(&mut self.model.params, &grads, &mut self.opt, self.cfg)?;
            stats.add(loss, g.value(pred), &batch.labels);
        }
        if self.cfg.bn_refresh {
            self.refresh_bn()?;
        }
        Ok(stats)
    }

    fn validate(&mut self) -> Result<Option<EpochStats>> {
        if self.val.is_empty() {
            return Ok(None);
        }
        let mut stats = EpochStats::default();
        let spec = self.batches(None);
        let r = self.model.structure.resolution;
        for batch in multi_res_batches(self.loader, &self.val, spec)? {
            let batch = batch?;
            let (g, parts, pred) = net_step(&mut self.model, batch.at(r)?, &batch.labels, self.cfg.weight_decay, BnMode::Infer)?;
            stats.add(g.value(parts.total).item(), g.value(pred), &batch.labels);
        }
        Ok(Some(stats))
    }

    fn keep_current(&mut self) {
        self.best = self.model.clone();
    }
}

/// Train a DilationNet of `variant` on the training partition of `manifest`.
pub fn train_stage1(variant: Variant, manifest: &DatasetManifest, loader: &mut SampleLoader, cfg: &TrainConfig) -> Result<TrainOutcome<DilationNetModel>> {
    train_stage1_with(variant, manifest, loader, cfg, &mut |_| Ok(()))
}

/// As [`train_stage1`], reporting each finished epoch to `on_epoch` as it
/// completes.
pub fn train_stage1_with(
    variant: Variant,
    manifest: &DatasetManifest,
    loader: &mut SampleLoader,
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochRecord) -> Result<()>,
) -> Result<TrainOutcome<DilationNetModel>> {
    let (fit, val) = split_training(manifest, cfg)?;
    let model = DilationNetModel::init(build_dilation_net(variant.resolution())?, cfg.seed);
    let mut session = NetSession { best: model.clone(), model, opt: OptimizerState::new(), loader, fit, val, cfg };
    let (trace, best_epoch) = drive(&mut session, cfg, on_epoch)?;
    let model = session.best;
    let checkpoint = model.to_checkpoint(provenance(cfg, &trace, best_epoch));
    Ok(TrainOutcome { model, checkpoint, trace, best_epoch })
}

/// Backbone features memoized per member and sample id, so heads over
/// overlapping member sets extract each feature once. A bank must only ever
/// see one backbone per variant.
#[derive(Clone, Debug, Default)]
pub struct FeatureBank {
    members: BTreeMap<Variant, HashMap<String, Vec<f32>>>,
}

impl FeatureBank {
    pub fn new() -> Self {
        Self::default()
    }

    /// Concatenated features `(n, width)` in backbone order and labels
    /// `(n, 1)`, both in record order, without augmentation.
    pub fn gather(
        &mut self,
        backbones: &[FrozenBackbone],
        loader: &mut SampleLoader,
        records: &[&SampleRecord],
        batch_size: usize,
    ) -> Result<(Tensor, Tensor)> {
        if records.is_empty() {
            return Err(Error::Empty("no records to extract features for".into()));
        }
        for bb in backbones {
            let known = self.members.entry(bb.variant).or_default();
            let missing: Vec<&SampleRecord> = records.iter().copied().filter(|r| !known.contains_key(&r.id)).collect();
            if missing.is_empty() {
                continue;
            }
            let spec = BatchSpec {
                batch_size,
                resolutions: vec![bb.resolution],
                augmentation: None,
                seed: 0,
                shuffle: false,
            };
            for batch in multi_res_batches(loader, &missing, spec)? {
                let batch = batch?;
                let f = bb.features_of(batch.at(bb.resolution)?, batch_size)?;
                let w = f.shape()[1];
                for (i, id) in batch.ids.iter().enumerate() {
                    known.insert(id.clone(), f.data()[i * w..(i + 1) * w].to_vec());
                }
            }
        }
        let width: usize = backbones.iter().map(FrozenBackbone::feature_width).sum();
        let mut data = Vec::with_capacity(records.len() * width);
        for r in records {
            for bb in backbones {
                data.extend_from_slice(&self.members[&bb.variant][&r.id]);
            }
        }
        let labels = records.iter().map(|r| r.label as f32).collect();
        Ok((Tensor::new(vec![records.len(), width], data)?, Tensor::new(vec![records.len(), 1], labels)?))
    }
}

/// Concatenated backbone features `(n, width)` and labels `(n, 1)`.
struct FeatureSet {
    features: Tensor,
    labels: Tensor,
}

impl FeatureSet {
    fn compute(bank: &mut FeatureBank, backbones: &[FrozenBackbone], loader: &mut SampleLoader, records: &[&SampleRecord], batch_size: usize) -> Result<Self> {
        let (features, labels) = bank.gather(backbones, loader, records, batch_size)?;
        Ok(Self { features, labels })
    }

    fn len(&self) -> usize {
        self.labels.shape()[0]
    }

    fn gather(&self, idx: &[usize]) -> Result<(Tensor, Tensor)> {
        let rows = |t: &Tensor| -> Result<Tensor> {
            let parts: Vec<Tensor> = idx.iter().map(|&i| t.slice_batch(i, i + 1)).collect::<Result<_>>()?;
            Tensor::stack_batch(&parts)
        };
        Ok((rows(&self.features)?, rows(&self.labels)?))
    }
}

struct FusionSession<'a, 'r> {
    model: FusionModel,
    best: FusionModel,
    opt: OptimizerState,
    loader: &'a mut SampleLoader,
    fit: Vec<&'r SampleRecord>,
    /// Present when training without augmentation.
    fit_cache: Option<FeatureSet>,
    val_cache: Option<FeatureSet>,
    cfg: &'a TrainConfig,
}

fn head_step(model: &FusionModel, features: &Tensor, labels: &Tensor, lambda: f32) -> Result<(Graph, LossParts, Var)> {
    let mut g = Graph::new();
    let f = g.input(features.clone());
    let pred = model.head().forward(&mut g, f, Binder::trainable(&model.head_params))?;
    let weights = decayed_weights(&g);
    let parts = bce_l2_loss(&mut g, pred, labels, &weights, lambda)?;
    Ok((g, parts, pred))
}

impl FusionSession<'_, '_> {
    fn update(&mut self, features: &Tensor, labels: &Tensor, epoch: usize, stats: &mut EpochStats) -> Result<()> {
        let (g, parts, pred) = head_step(&self.model, features, labels, self.cfg.weight_decay)?;
        let loss = g.value(parts.total).item();
        check_finite(loss, epoch)?;
        let grads = g.backward(parts.total)?;
        adam_step(&mut self.model.head_params, &grads, &mut self.opt, self.cfg)?;
        stats.add(loss, g.value(pred), labels);
        Ok(())
    }
}

impl Session for FusionSession<'_, '_> {
    fn train_epoch(&mut self, epoch: usize) -> Result<EpochStats> {
        let mut stats = EpochStats::default();
        let seed = mix_seed(self.cfg.seed, epoch as u64);
        if let Some(cache) = self.fit_cache.take() {
            let mut order: Vec<usize> = (0..cache.len()).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let result = order.chunks(self.cfg.batch_size).try_for_each(|idx| {
                let (f, y) = cache.gather(idx)?;
                self.update(&f, &y, epoch, &mut stats)
            });
            self.fit_cache = Some(cache);
            result?;
        } else {
            let spec = BatchSpec {
                batch_size: self.cfg.batch_size,
                resolutions: self.model.resolutions(),
                augmentation: self.cfg.augmentation.clone(),
                seed,
                shuffle: true,
            };
            let fit = self.fit.clone();
            let backbones = self.model.backbones.clone();
            let mut batches = Vec::new();
            for batch in multi_res_batches(self.loader, &fit, spec)? {
                let batch = batch?;
                batches.push((batch_features(&batch.streams(), &backbones)?, batch.labels));
            }
            for (f, y) in batches {
                self.update(&f, &y, epoch, &mut stats)?;
            }
        }
        Ok(stats)
    }

    fn validate(&mut self) -> Result<Option<EpochStats>> {
        let Some(cache) = &self.val_cache else {
            return Ok(None);
        };
        let mut stats = EpochStats::default();
        let idx: Vec<usize> = (0..cache.len()).collect();
        for chunk in idx.chunks(self.cfg.batch_size) {
            let (f, y) = cache.gather(chunk)?;
            let (g, parts, pred) = head_step(&self.model, &f, &y, self.cfg.weight_decay)?;
            stats.add(g.value(parts.total).item(), g.value(pred), &y);
        }
        Ok(Some(stats))
    }

    fn keep_current(&mut self) {
        self.best.head_params = self.model.head_params.clone();
    }
}

/// Put backbones in member order, one per member.
fn order_backbones(spec: &FusionSpec, backbones: Vec<FrozenBackbone>) -> Result<Vec<FrozenBackbone>> {
    spec.validate()?;
    if backbones.len() != spec.members.len() {
        return Err(Error::InvalidArgument(format!(
            "{} backbones given for the {} members of {}",
            backbones.len(),
            spec.members.len(),
            spec.label()
        )));
    }
    spec.members
        .iter()
        .map(|v| {
            backbones
                .iter()
                .find(|b| b.variant == *v)
                .cloned()
                .ok_or_else(|| Error::InvalidArgument(format!("no backbone for member {v}")))
        })
        .collect()
}

/// Fresh fusion model with an initialized head.
pub fn init_fusion(spec: &FusionSpec, backbones: Vec<FrozenBackbone>, seed: u64) -> Result<FusionModel> {
    let backbones = order_backbones(spec, backbones)?;
    let mut model = FusionModel { spec: spec.clone(), backbones, head_params: Default::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x6675_7369_6f6e));
    model.head_params = model.head().init_params(&mut rng);
    Ok(model)
}

/// Train the fusion head of `spec` over frozen `backbones`.
pub fn train_stage2(
    spec: &FusionSpec,
    backbones: Vec<FrozenBackbone>,
    manifest: &DatasetManifest,
    loader: &mut SampleLoader,
    cfg: &TrainConfig,
) -> Result<TrainOutcome<FusionModel>> {
    train_stage2_with(spec, backbones, manifest, loader, cfg, &mut FeatureBank::new(), &mut |_| Ok(()))
}

/// As [`train_stage2`], drawing unaugmented features from `bank` and
/// reporting each finished epoch to `on_epoch`.
pub fn train_stage2_with(
    spec: &FusionSpec,
    backbones: Vec<FrozenBackbone>,
    manifest: &DatasetManifest,
    loader: &mut SampleLoader,
    cfg: &TrainConfig,
    bank: &mut FeatureBank,
    on_epoch: &mut dyn FnMut(&EpochRecord) -> Result<()>,
) -> Result<TrainOutcome<FusionModel>> {
    let (fit, val) = split_training(manifest, cfg)?;
    let model = init_fusion(spec, backbones, cfg.seed)?;
    let augmenting = cfg.augmentation.as_ref().is_some_and(|a| !a.is_identity());
    let fit_cache = if augmenting {
        None
    } else {
        Some(FeatureSet::compute(bank, &model.backbones, loader, &fit, cfg.batch_size)?)
    };
    let val_cache = if val.is_empty() {
        None
    } else {
        Some(FeatureSet::compute(bank, &model.backbones, loader, &val, cfg.batch_size)?)
    };
    let mut session = FusionSession {
        best: model.clone(),
        model,
        opt: OptimizerState::new(),
        loader,
        fit,
        fit_cache,
        val_cache,
        cfg,
    };
    let (trace, best_epoch) = drive(&mut session, cfg, on_epoch)?;
    let model = session.best;
    let checkpoint = model.to_checkpoint(provenance(cfg, &trace, best_epoch));
    Ok(TrainOutcome { model, checkpoint, trace, best_epoch })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(epoch: usize, acc: f64, loss: f64) -> EpochRecord {
        EpochRecord { epoch, train_loss: 0.0, train_acc: 0.0, val_loss: Some(loss), val_acc: Some(acc) }
    }

    #[test]
    fn selection_prefers_accuracy_then_loss_then_earlier() {
        assert!(better(&rec(2, 0.9, 0.5), &rec(1, 0.8, 0.1)));
        assert!(better(&rec(2, 0.9, 0.3), &rec(1, 0.9, 0.4)));
        assert!(!better(&rec(2, 0.9, 0.4), &rec(1, 0.9, 0.4)));
        assert!(!better(&rec(2, 0.8, 0.1), &rec(1, 0.9, 0.4)));
    }

    #[test]
    fn config_invariants() {
        assert!(TrainConfig::default().validate().is_ok());
        let cases = [
            TrainConfig { beta1: 0.99, beta2: 0.9, ..Default::default() },
            TrainConfig { batch_size: 0, ..Default::default() },
            TrainConfig { learning_rate: 0.0, ..Default::default() },
            TrainConfig { weight_decay: -1.0, ..Default::default() },
            TrainConfig { validation_fraction: 1.0, ..Default::default() },
        ];
        for c in cases {
            assert!(c.validate().is_err(), "{c:?}");
        }
    }
}
