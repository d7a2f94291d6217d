//! Multi-resolution feature fusion over frozen backbones.
//!
//! Each member network contributes its pooled convolutional features for its
//! own input resolution. The features are concatenated in member order and
//! passed through four dense layers and a sigmoid. Backbone parameters enter
//! the graph as constants, so only the dense head can receive gradients.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::MultiResBatch;
use crate::error::{Error, Result};
use crate::graph::{BnMode, Graph, Var};
use crate::network::{dense_forward, init_dense, Activation, Binder, BnContext, DenseSpec, NetStructure, Variant};
use crate::params::{BnStore, ParamStore};
use crate::tensor::Tensor;
use crate::train::checkpoint::{member_prefix, Checkpoint, FusionHeader, MemberHeader, ModelHeader, Provenance};

pub const HEAD_WIDTHS: [usize; 4] = [256, 64, 16, 1];

/// Which backbones to fuse and the dense head on top of them.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FusionSpec {
    pub members: Vec<Variant>,
    pub widths: Vec<usize>,
    pub hidden_activation: Activation,
}

impl FusionSpec {
    pub fn new(members: &[Variant]) -> Result<Self> {
        let spec = Self {
            members: members.to_vec(),
            widths: HEAD_WIDTHS.to_vec(),
            hidden_activation: Activation::Relu,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.members.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "fusion needs at least two members, got {}",
                self.members.len()
            )));
        }
        let mut seen = self.members.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.members.len() {
            return Err(Error::InvalidArgument("fusion members must be distinct".into()));
        }
        if self.widths.len() != 4 || self.widths.last() != Some(&1) {
            return Err(Error::InvalidArgument("fusion head must have four dense layers ending in one unit".into()));
        }
        Ok(())
    }

    /// `A+B+C` style label.
    pub fn label(&self) -> String {
        self.members.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("+")
    }

    pub fn head(&self, input_width: usize) -> FusionHead {
        let mut layers = Vec::with_capacity(self.widths.len());
        let mut inputs = input_width;
        for (i, &w) in self.widths.iter().enumerate() {
            let last = i + 1 == self.widths.len();
            layers.push(DenseSpec {
                name: format!("fusion.dense{}", i + 1),
                inputs,
                outputs: w,
                activation: if last { Activation::Sigmoid } else { self.hidden_activation },
            });
            inputs = w;
        }
        FusionHead { layers }
    }
}

/// Dense stack `d_i = σ(W_i·d_{i−1} + b_i)` with a linear last layer
/// followed by the output sigmoid.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionHead {
    pub layers: Vec<DenseSpec>,
}

impl FusionHead {
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        self.layers
            .iter()
            .flat_map(|d| {
                [
                    (format!("{}.w", d.name), vec![d.inputs, d.outputs]),
                    (format!("{}.b", d.name), vec![d.outputs]),
                ]
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|d| d.inputs * d.outputs + d.outputs).sum()
    }

    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamStore {
        let mut p = ParamStore::new();
        for d in &self.layers {
            init_dense(&mut p, d, rng);
        }
        p
    }

    pub fn forward(&self, g: &mut Graph, features: Var, binder: Binder<'_>) -> Result<Var> {
        let mut x = features;
        for d in &self.layers {
            x = dense_forward(g, x, d, binder)?;
        }
        Ok(x)
    }
}

/// Convolutional stack of a trained network, with its head removed and its
/// batch-norm layers fixed to their running statistics. `structure` is the
/// full network the backbone came from; only its layers up to the pool are
/// evaluated and stored.
#[derive(Clone, Debug, PartialEq)]
pub struct FrozenBackbone {
    pub variant: Variant,
    pub resolution: usize,
    pub structure: NetStructure,
    pub params: ParamStore,
    pub bn: BnStore,
}

impl FrozenBackbone {
    pub fn feature_width(&self) -> usize {
        self.structure.feature_width()
    }

    /// Pooled features `(n, feature_width)`; parameters enter as constants.
    pub fn features(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let mut bn = self.bn.clone();
        let mut ctx = BnContext::new(&mut bn, BnMode::Infer);
        self.structure.features(g, x, Binder::frozen(&self.params), &mut ctx)
    }

    /// Features for a whole tensor of images, evaluated in chunks.
    pub fn features_of(&self, images: &Tensor, chunk: usize) -> Result<Tensor> {
        let n = images.shape()[0];
        let mut parts = Vec::new();
        let mut start = 0;
        while start < n {
            let end = (start + chunk.max(1)).min(n);
            let mut g = Graph::new();
            let x = g.input(images.slice_batch(start, end)?);
            let f = self.features(&mut g, x)?;
            parts.push(g.value(f).clone());
            start = end;
        }
        Tensor::stack_batch(&parts)
    }
}

impl NetStructure {
    /// The layers up to and including global pooling.
    pub fn backbone_only(&self) -> NetStructure {
        NetStructure {
            variant: self.variant,
            resolution: self.resolution,
            layers: self.layers[..=self.pool_index()].to_vec(),
        }
    }
}

/// Strip the dense head from a trained stage-1 checkpoint.
pub fn extract_backbone(ckpt: &Checkpoint) -> Result<FrozenBackbone> {
    let ModelHeader::DilationNet { variant, structure, structure_hash } = &ckpt.model else {
        return Err(Error::Checkpoint("expected a single-network checkpoint, found a fusion checkpoint".into()));
    };
    ckpt.validate()?;
    let expected = crate::network::build_dilation_net(variant.resolution())?;
    if &expected.structure_hash() != structure_hash {
        return Err(Error::Checkpoint(format!(
            "checkpoint structure does not match the variant {variant} network of this build"
        )));
    }
    let backbone = structure.backbone_only();
    let mut params = ParamStore::new();
    for (name, _) in backbone.param_shapes() {
        params.insert(name.clone(), ckpt.params.get(&name)?.clone());
    }
    let mut bn = BnStore::new();
    for (name, _) in backbone.bn_layers() {
        bn.insert(name.clone(), ckpt.bn.get(&name)?.clone());
    }
    Ok(FrozenBackbone {
        variant: *variant,
        resolution: structure.resolution,
        structure: structure.clone(),
        params,
        bn,
    })
}

/// Images of one resolution for a batch, tagged with the sample IDs in order.
#[derive(Clone, Copy, Debug)]
pub struct ResolutionStream<'a> {
    pub resolution: usize,
    pub ids: &'a [String],
    pub images: &'a Tensor,
}

impl MultiResBatch {
    pub fn streams(&self) -> Vec<ResolutionStream<'_>> {
        self.images
            .iter()
            .map(|(&r, t)| ResolutionStream { resolution: r, ids: &self.ids, images: t })
            .collect()
    }
}

/// Reject streams whose sample IDs differ in content or order.
pub fn check_alignment(streams: &[ResolutionStream<'_>]) -> Result<()> {
    let Some(first) = streams.first() else {
        return Err(Error::Empty("no input streams".into()));
    };
    for s in streams {
        if s.ids != first.ids {
            return Err(Error::Misaligned(format!(
                "{}x{} stream carries different samples than the {}x{} stream",
                s.resolution, s.resolution, first.resolution, first.resolution
            )));
        }
        if s.images.shape().first() != Some(&s.ids.len()) {
            return Err(Error::Misaligned(format!(
                "{}x{} stream has {:?} images for {} ids",
                s.resolution,
                s.resolution,
                s.images.shape(),
                s.ids.len()
            )));
        }
    }
    Ok(())
}

/// Concatenated backbone features, in backbone order.
pub fn fused_features(g: &mut Graph, streams: &[ResolutionStream<'_>], backbones: &[FrozenBackbone]) -> Result<Var> {
    check_alignment(streams)?;
    let mut feats = Vec::with_capacity(backbones.len());
    for bb in backbones {
        let stream = streams
            .iter()
            .find(|s| s.resolution == bb.resolution)
            .ok_or_else(|| Error::Misaligned(format!("no {}x{} stream for member {}", bb.resolution, bb.resolution, bb.variant)))?;
        let x = g.input(stream.images.clone());
        feats.push(bb.features(g, x)?);
    }
    g.concat(&feats)
}

/// Concatenated features of one aligned batch, evaluated outside any
/// training graph.
pub fn batch_features(streams: &[ResolutionStream<'_>], backbones: &[FrozenBackbone]) -> Result<Tensor> {
    let mut g = Graph::new();
    let f = fused_features(&mut g, streams, backbones)?;
    Ok(g.value(f).clone())
}

/// Full fusion forward pass to probabilities `(n, 1)`.
pub fn fusion_forward(
    g: &mut Graph,
    streams: &[ResolutionStream<'_>],
    backbones: &[FrozenBackbone],
    head: &FusionHead,
    binder: Binder<'_>,
) -> Result<Var> {
    let f = fused_features(g, streams, backbones)?;
    head.forward(g, f, binder)
}

/// Every subset of `variants` with at least two members, by size and then
/// lexicographically.
pub fn enumerate_combinations(variants: &[Variant]) -> Vec<FusionSpec> {
    let mut sorted = variants.to_vec();
    sorted.sort();
    sorted.dedup();
    let n = sorted.len();
    let mut out = Vec::new();
    for size in 2..=n {
        let mut subsets: Vec<Vec<Variant>> = (0u32..(1 << n))
            .filter(|mask| mask.count_ones() as usize == size)
            .map(|mask| (0..n).filter(|i| mask & (1 << i) != 0).map(|i| sorted[i]).collect())
            .collect();
        subsets.sort();
        out.extend(subsets.into_iter().map(|s| FusionSpec::new(&s).expect("distinct members, size >= 2")));
    }
    out
}

/// A fusion model ready for evaluation or checkpointing.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionModel {
    pub spec: FusionSpec,
    pub backbones: Vec<FrozenBackbone>,
    pub head_params: ParamStore,
}

impl FusionModel {
    pub fn head(&self) -> FusionHead {
        self.spec.head(self.backbones.iter().map(FrozenBackbone::feature_width).sum())
    }

    pub fn to_checkpoint(&self, provenance: Provenance) -> Checkpoint {
        let mut params = self.head_params.clone();
        let mut bn = BnStore::new();
        let mut members = Vec::new();
        for bb in &self.backbones {
            let prefix = member_prefix(bb.variant);
            params.extend(bb.params.with_prefix(&prefix));
            bn.extend(bb.bn.with_prefix(&prefix));
            members.push(MemberHeader {
                variant: bb.variant,
                structure: bb.structure.clone(),
                structure_hash: bb.structure.structure_hash(),
            });
        }
        Checkpoint {
            model: ModelHeader::Fusion(FusionHeader { spec: self.spec.clone(), members }),
            provenance,
            params,
            bn,
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let ModelHeader::Fusion(fh) = &ckpt.model else {
            return Err(Error::Checkpoint("expected a fusion checkpoint".into()));
        };
        ckpt.validate()?;
        let mut backbones = Vec::new();
        for m in &fh.members {
            let prefix = member_prefix(m.variant);
            backbones.push(FrozenBackbone {
                variant: m.variant,
                resolution: m.structure.resolution,
                structure: m.structure.clone(),
                params: ckpt.params.strip_prefix(&prefix),
                bn: ckpt.bn.strip_prefix(&prefix),
            });
        }
        let model = FusionModel {
            spec: fh.spec.clone(),
            backbones,
            head_params: ParamStore::new(),
        };
        let mut head_params = ParamStore::new();
        for (name, _) in model.head().param_shapes() {
            head_params.insert(name.clone(), ckpt.params.get(&name)?.clone());
        }
        Ok(FusionModel { head_params, ..model })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_order_combinations() {
        let labels: Vec<String> = enumerate_combinations(&Variant::ALL).iter().map(FusionSpec::label).collect();
        assert_eq!(
            labels,
            ["A+B", "A+C", "A+D", "B+C", "B+D", "C+D", "A+B+C", "A+B+D", "A+C+D", "B+C+D", "A+B+C+D"]
        );
    }

    #[test]
    fn spec_needs_two_distinct_members() {
        assert!(FusionSpec::new(&[Variant::A]).is_err());
        assert!(FusionSpec::new(&[Variant::A, Variant::A]).is_err());
        assert!(FusionSpec::new(&[Variant::A, Variant::C]).is_ok());
    }

    #[test]
    fn head_has_four_dense_layers() {
        let head = FusionSpec::new(&[Variant::A, Variant::B]).unwrap().head(192);
        assert_eq!(head.layers.len(), 4);
        assert_eq!(head.layers[0].inputs, 192);
        assert_eq!(head.layers[3].outputs, 1);
        assert_eq!(head.layers[3].activation, Activation::Sigmoid);
        assert_eq!(head.param_count(), 192 * 256 + 256 + 256 * 64 + 64 + 64 * 16 + 16 + 16 + 1);
    }
}
