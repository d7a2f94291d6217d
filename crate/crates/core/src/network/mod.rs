//! Resolution-scaled multi-dilation networks.
//!
//! A network is a declarative [`NetStructure`]: a two-conv stem, a stack of
//! multi-dilation blocks that each halve the spatial size, global average
//! pooling, and a two-layer dense head. The number of blocks is whatever
//! brings the feature map down to 4×4 for the chosen input resolution.

mod block;
mod summary;

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::conv::ConvSpec;
use crate::error::{Error, Result};
use crate::graph::{BnMode, Graph, RunningMoments, Var};
use crate::params::{BnStore, ParamStore};
use crate::tensor::Tensor;

pub use block::{classifier_head_forward, conv_unit_forward, dense_forward, multi_dilation_block_forward};
pub use summary::{summary_table, SummaryRow};

pub const STEM_FILTERS: usize = 32;
pub const BLOCK_CHANNELS: [usize; 5] = [64, 96, 128, 160, 192];
pub const HEAD_HIDDEN: usize = 64;
pub const FINAL_SPATIAL: usize = 4;
pub const INPUT_CHANNELS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    A,
    B,
    C,
    D,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::A, Variant::B, Variant::C, Variant::D];

    pub fn resolution(self) -> usize {
        match self {
            Variant::A => 32,
            Variant::B => 64,
            Variant::C => 128,
            Variant::D => 256,
        }
    }

    pub fn from_resolution(r: usize) -> Result<Self> {
        match r {
            32 => Ok(Variant::A),
            64 => Ok(Variant::B),
            128 => Ok(Variant::C),
            256 => Ok(Variant::D),
            other => Err(Error::UnsupportedResolution(other)),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let c = match self {
            Variant::A => 'A',
            Variant::B => 'B',
            Variant::C => 'C',
            Variant::D => 'D',
        };
        write!(f, "{c}")
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "A" | "a" => Ok(Variant::A),
            "B" | "b" => Ok(Variant::B),
            "C" | "c" => Ok(Variant::C),
            "D" | "d" => Ok(Variant::D),
            other => Err(Error::InvalidArgument(format!("unknown variant `{other}`; expected A, B, C or D"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Activation {
    Identity,
    Relu,
    Sigmoid,
}

/// Convolution followed by Relu and (optionally) batch normalization.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConvUnit {
    pub name: String,
    pub spec: ConvSpec,
    pub batch_norm: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MultiDilationBlockSpec {
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub branch_kernel: usize,
    pub max_dilation: usize,
    pub batch_norm: bool,
}

impl MultiDilationBlockSpec {
    /// Branch `k` (1-based) convolves at dilation `k`, preserving channels.
    pub fn branch(&self, k: usize) -> ConvUnit {
        ConvUnit {
            name: format!("{}.branch{k}", self.name),
            spec: ConvSpec::same(self.branch_kernel, k, self.in_channels, self.in_channels),
            batch_norm: self.batch_norm,
        }
    }

    /// Spatial downsampling shifter: 3×3, stride 2, channels preserved.
    pub fn shifter_down(&self) -> ConvUnit {
        ConvUnit {
            name: format!("{}.n1", self.name),
            spec: ConvSpec {
                kernel: 3,
                stride: 2,
                dilation: 1,
                padding: 1,
                in_channels: self.in_channels,
                out_channels: self.in_channels,
            },
            batch_norm: self.batch_norm,
        }
    }

    /// Channel-expanding shifter: 3×3, stride 1.
    pub fn shifter_expand(&self) -> ConvUnit {
        ConvUnit {
            name: format!("{}.n2", self.name),
            spec: ConvSpec::same(3, 1, self.in_channels, self.out_channels),
            batch_norm: self.batch_norm,
        }
    }

    /// Every conv unit in execution order: branches, then both shifters.
    pub fn units(&self) -> Vec<ConvUnit> {
        let mut v: Vec<ConvUnit> = (1..=self.max_dilation).map(|k| self.branch(k)).collect();
        v.push(self.shifter_down());
        v.push(self.shifter_expand());
        v
    }

    /// Reject a spec whose largest-dilation branch does not fit `spatial`.
    pub fn validate(&self, spatial: usize) -> Result<()> {
        if self.max_dilation == 0 {
            return Err(Error::InvalidArgument(format!("{}: max dilation must be >= 1", self.name)));
        }
        let extent = self.branch(self.max_dilation).spec.effective_extent();
        if extent > spatial {
            return Err(Error::InvalidArgument(format!(
                "{}: dilation {} spans {extent} pixels but the input is only {spatial} wide",
                self.name, self.max_dilation
            )));
        }
        if self.out_channels <= self.in_channels {
            return Err(Error::InvalidArgument(format!(
                "{}: block must expand channels ({} -> {})",
                self.name, self.in_channels, self.out_channels
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DenseSpec {
    pub name: String,
    pub inputs: usize,
    pub outputs: usize,
    pub activation: Activation,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Layer {
    Conv(ConvUnit),
    Block(MultiDilationBlockSpec),
    GlobalAvgPool,
    Dense(DenseSpec),
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct NetStructure {
    pub variant: Variant,
    pub resolution: usize,
    pub layers: Vec<Layer>,
}

/// Largest branch dilation for a block whose input is `spatial` pixels wide.
pub fn max_dilation_for(spatial: usize) -> usize {
    match spatial {
        s if s >= 32 => 4,
        16..=31 => 3,
        _ => 2,
    }
}

/// Build the network for input resolution `r ∈ {32, 64, 128, 256}`.
pub fn build_dilation_net(r: usize) -> Result<NetStructure> {
    let variant = Variant::from_resolution(r)?;
    let mut layers = vec![
        Layer::Conv(ConvUnit {
            name: "stem.conv1".into(),
            spec: ConvSpec::same(5, 1, INPUT_CHANNELS, STEM_FILTERS),
            batch_norm: true,
        }),
        Layer::Conv(ConvUnit {
            name: "stem.conv2".into(),
            spec: ConvSpec {
                kernel: 3,
                stride: 2,
                dilation: 1,
                padding: 1,
                in_channels: STEM_FILTERS,
                out_channels: STEM_FILTERS,
            },
            batch_norm: true,
        }),
    ];
    let mut spatial = r / 2;
    let mut channels = STEM_FILTERS;
    let mut index = 0;
    while spatial > FINAL_SPATIAL {
        let out_channels = BLOCK_CHANNELS[index];
        let spec = MultiDilationBlockSpec {
            name: format!("block{}", index + 1),
            in_channels: channels,
            out_channels,
            branch_kernel: 3,
            max_dilation: max_dilation_for(spatial),
            batch_norm: true,
        };
        spec.validate(spatial)?;
        layers.push(Layer::Block(spec));
        spatial /= 2;
        channels = out_channels;
        index += 1;
    }
    layers.push(Layer::GlobalAvgPool);
    layers.push(Layer::Dense(DenseSpec {
        name: "head.dense1".into(),
        inputs: channels,
        outputs: HEAD_HIDDEN,
        activation: Activation::Relu,
    }));
    layers.push(Layer::Dense(DenseSpec {
        name: "head.dense2".into(),
        inputs: HEAD_HIDDEN,
        outputs: 1,
        activation: Activation::Sigmoid,
    }));
    Ok(NetStructure { variant, resolution: r, layers })
}

/// How a forward pass registers parameters on the graph.
#[derive(Clone, Copy)]
pub struct Binder<'a> {
    pub params: &'a ParamStore,
    pub prefix: &'a str,
    /// When false, parameters enter the graph as constants and receive no
    /// gradient.
    pub trainable: bool,
}

impl<'a> Binder<'a> {
    pub fn trainable(params: &'a ParamStore) -> Self {
        Self { params, prefix: "", trainable: true }
    }

    pub fn frozen(params: &'a ParamStore) -> Self {
        Self { params, prefix: "", trainable: false }
    }

    pub fn with_prefix(self, prefix: &'a str) -> Self {
        Self { prefix, ..self }
    }

    pub fn bind(&self, g: &mut Graph, name: &str) -> Result<Var> {
        let full = format!("{}{name}", self.prefix);
        let t = self.params.get(&full)?.clone();
        Ok(if self.trainable { g.param(&full, t) } else { g.input(t) })
    }
}

/// Batch-norm state threaded through a forward pass.
pub struct BnContext<'a> {
    pub store: &'a mut BnStore,
    pub prefix: &'a str,
    pub mode: BnMode,
}

impl<'a> BnContext<'a> {
    pub fn new(store: &'a mut BnStore, mode: BnMode) -> Self {
        Self { store, prefix: "", mode }
    }

    pub(crate) fn moments(&mut self, name: &str) -> Result<&mut RunningMoments> {
        let full = format!("{}{name}", self.prefix);
        self.store.get_mut(&full)
    }
}

impl NetStructure {
    pub fn blocks(&self) -> impl Iterator<Item = &MultiDilationBlockSpec> {
        self.layers.iter().filter_map(|l| match l {
            Layer::Block(b) => Some(b),
            _ => None,
        })
    }

    pub fn block_count(&self) -> usize {
        self.blocks().count()
    }

    /// Index of the global pooling layer; everything before it is the
    /// convolutional backbone.
    pub fn pool_index(&self) -> usize {
        self.layers
            .iter()
            .position(|l| matches!(l, Layer::GlobalAvgPool))
            .expect("network has a pooling layer")
    }

    /// Channel count of the pooled feature vector.
    pub fn feature_width(&self) -> usize {
        self.layers[..self.pool_index()]
            .iter()
            .rev()
            .find_map(|l| match l {
                Layer::Conv(c) => Some(c.spec.out_channels),
                Layer::Block(b) => Some(b.out_channels),
                _ => None,
            })
            .unwrap_or(INPUT_CHANNELS)
    }

    /// `(height, width, channels)` after every layer, starting from the input.
    pub fn shape_trace(&self) -> Result<Vec<Vec<usize>>> {
        let mut shape = vec![self.resolution, self.resolution, INPUT_CHANNELS];
        let mut out = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            shape = match layer {
                Layer::Conv(u) => conv_out_shape(&shape, &u.spec)?,
                Layer::Block(b) => {
                    let mut s = shape.clone();
                    for u in b.units() {
                        s = conv_out_shape(&s, &u.spec)?;
                    }
                    s
                }
                Layer::GlobalAvgPool => vec![shape[2]],
                Layer::Dense(d) => vec![d.outputs],
            };
            out.push(shape.clone());
        }
        Ok(out)
    }

    /// Spatial size of the map entering global pooling.
    pub fn pre_pool_size(&self) -> Result<(usize, usize)> {
        let trace = self.shape_trace()?;
        let s = &trace[self.pool_index() - 1];
        Ok((s[0], s[1]))
    }

    /// Every convolution in execution order, with block internals expanded.
    pub fn conv_units(&self) -> Vec<ConvUnit> {
        let mut v = Vec::new();
        for layer in &self.layers {
            match layer {
                Layer::Conv(u) => v.push(u.clone()),
                Layer::Block(b) => v.extend(b.units()),
                _ => {}
            }
        }
        v
    }

    /// Every parameter name and shape, in layer order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut v = Vec::new();
        for layer in &self.layers {
            match layer {
                Layer::Conv(u) => push_unit_shapes(&mut v, u),
                Layer::Block(b) => b.units().iter().for_each(|u| push_unit_shapes(&mut v, u)),
                Layer::GlobalAvgPool => {}
                Layer::Dense(d) => push_dense_shapes(&mut v, d),
            }
        }
        v
    }

    /// Names of batch-norm layers with their channel counts.
    pub fn bn_layers(&self) -> Vec<(String, usize)> {
        self.conv_units()
            .into_iter()
            .filter(|u| u.batch_norm)
            .map(|u| (format!("{}.bn", u.name), u.spec.out_channels))
            .collect()
    }

    /// Fan-in scaled uniform weights, zero biases, γ = 1, β = 0, and fresh
    /// running moments.
    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> (ParamStore, BnStore) {
        let mut params = ParamStore::new();
        for layer in &self.layers {
            match layer {
                Layer::Conv(u) => init_unit(&mut params, u, rng),
                Layer::Block(b) => b.units().iter().for_each(|u| init_unit(&mut params, u, rng)),
                Layer::GlobalAvgPool => {}
                Layer::Dense(d) => init_dense(&mut params, d, rng),
            }
        }
        let mut bn = BnStore::new();
        for (name, c) in self.bn_layers() {
            bn.insert(name, RunningMoments::new(c));
        }
        (params, bn)
    }

    /// Run layers `range` of the network on `x`.
    pub fn forward_layers(
        &self,
        g: &mut Graph,
        mut x: Var,
        range: std::ops::Range<usize>,
        binder: Binder<'_>,
        bn: &mut BnContext<'_>,
    ) -> Result<Var> {
        for layer in &self.layers[range] {
            x = match layer {
                Layer::Conv(u) => conv_unit_forward(g, x, u, binder, bn)?,
                Layer::Block(b) => multi_dilation_block_forward(g, x, b, binder, bn)?,
                Layer::GlobalAvgPool => g.global_avg_pool(x)?,
                Layer::Dense(d) => dense_forward(g, x, d, binder)?,
            };
        }
        Ok(x)
    }

    /// Full forward pass: input `(n, r, r, 3)` to probabilities `(n, 1)`.
    pub fn forward(&self, g: &mut Graph, x: Var, binder: Binder<'_>, bn: &mut BnContext<'_>) -> Result<Var> {
        self.check_input(g.value(x))?;
        self.forward_layers(g, x, 0..self.layers.len(), binder, bn)
    }

    /// Backbone forward pass: input `(n, r, r, 3)` to pooled features
    /// `(n, feature_width)`.
    pub fn features(&self, g: &mut Graph, x: Var, binder: Binder<'_>, bn: &mut BnContext<'_>) -> Result<Var> {
        self.check_input(g.value(x))?;
        self.forward_layers(g, x, 0..self.pool_index() + 1, binder, bn)
    }

    pub fn check_input(&self, x: &Tensor) -> Result<()> {
        let s = x.shape();
        if s.len() != 4 || s[1] != self.resolution || s[2] != self.resolution || s[3] != INPUT_CHANNELS {
            return Err(Error::shape(
                "network input",
                format!(
                    "variant {} expects (batch, {r}, {r}, {INPUT_CHANNELS}), got {s:?}",
                    self.variant,
                    r = self.resolution
                ),
            ));
        }
        Ok(())
    }

    /// Stable digest of the structure, used to match checkpoints to networks.
    pub fn structure_hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("structure serializes");
        hex::encode(Sha256::digest(json))
    }
}

/// Receptive-field extent, in input pixels, after conv unit `index` of
/// [`NetStructure::conv_units`].
///
/// Accumulates `rf += d·(k−1)·jump; jump *= s` over units `0..=index`. The
/// branches of a block chain into each other, so the last branch carries the
/// block's widest field.
pub fn receptive_field(net: &NetStructure, index: usize) -> Result<usize> {
    let units = net.conv_units();
    if index >= units.len() {
        return Err(Error::InvalidArgument(format!(
            "conv unit {index} out of range; network has {}",
            units.len()
        )));
    }
    Ok(receptive_field_of(units[..=index].iter().map(|u| &u.spec)))
}

pub fn receptive_field_of<'a>(specs: impl IntoIterator<Item = &'a ConvSpec>) -> usize {
    let (mut rf, mut jump) = (1, 1);
    for s in specs {
        rf += s.dilation * (s.kernel - 1) * jump;
        jump *= s.stride;
    }
    rf
}

fn conv_out_shape(shape: &[usize], spec: &ConvSpec) -> Result<Vec<usize>> {
    Ok(vec![spec.output_size(shape[0])?, spec.output_size(shape[1])?, spec.out_channels])
}

fn push_unit_shapes(v: &mut Vec<(String, Vec<usize>)>, u: &ConvUnit) {
    v.push((format!("{}.w", u.name), u.spec.weight_shape().to_vec()));
    v.push((format!("{}.b", u.name), vec![u.spec.out_channels]));
    if u.batch_norm {
        v.push((format!("{}.bn.gamma", u.name), vec![u.spec.out_channels]));
        v.push((format!("{}.bn.beta", u.name), vec![u.spec.out_channels]));
    }
}

fn push_dense_shapes(v: &mut Vec<(String, Vec<usize>)>, d: &DenseSpec) {
    v.push((format!("{}.w", d.name), vec![d.inputs, d.outputs]));
    v.push((format!("{}.b", d.name), vec![d.outputs]));
}

fn fan_in_uniform<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, gain: f32, rng: &mut R) -> Tensor {
    let limit = (gain / fan_in as f32).sqrt();
    Tensor::uniform(shape, -limit, limit, rng)
}

fn init_unit<R: Rng + ?Sized>(params: &mut ParamStore, u: &ConvUnit, rng: &mut R) {
    let s = &u.spec;
    let fan_in = s.kernel * s.kernel * s.in_channels;
    params.insert(format!("{}.w", u.name), fan_in_uniform(&s.weight_shape(), fan_in, 6.0, rng));
    params.insert(format!("{}.b", u.name), Tensor::zeros(&[s.out_channels]));
    if u.batch_norm {
        params.insert(format!("{}.bn.gamma", u.name), Tensor::ones(&[s.out_channels]));
        params.insert(format!("{}.bn.beta", u.name), Tensor::zeros(&[s.out_channels]));
    }
}

pub(crate) fn init_dense<R: Rng + ?Sized>(params: &mut ParamStore, d: &DenseSpec, rng: &mut R) {
    let gain = if d.activation == Activation::Relu { 6.0 } else { 3.0 };
    params.insert(format!("{}.w", d.name), fan_in_uniform(&[d.inputs, d.outputs], d.inputs, gain, rng));
    params.insert(format!("{}.b", d.name), Tensor::zeros(&[d.outputs]));
}

/// True for tensors subject to weight decay: conv and dense kernels, not
/// biases or batch-norm affine terms.
pub fn is_decayed_weight(name: &str) -> bool {
    name.ends_with(".w")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variant_resolution_mapping() {
        for (v, r) in Variant::ALL.iter().zip([32, 64, 128, 256]) {
            assert_eq!(v.resolution(), r);
            assert_eq!(Variant::from_resolution(r).unwrap(), *v);
        }
        assert!(Variant::from_resolution(48).is_err());
        assert!("E".parse::<Variant>().is_err());
        assert_eq!("c".parse::<Variant>().unwrap(), Variant::C);
    }

    #[test]
    fn unsupported_resolution_rejected() {
        assert!(matches!(build_dilation_net(100), Err(Error::UnsupportedResolution(100))));
    }

    #[test]
    fn block_spec_rejects_oversized_dilation() {
        let spec = MultiDilationBlockSpec {
            name: "b".into(),
            in_channels: 4,
            out_channels: 8,
            branch_kernel: 3,
            max_dilation: 3,
            batch_norm: true,
        };
        assert!(spec.validate(7).is_ok());
        assert!(spec.validate(6).is_err());
    }

    #[test]
    fn receptive_field_closed_form() {
        let single = |k, d| ConvSpec { kernel: k, stride: 1, dilation: d, padding: 0, in_channels: 1, out_channels: 1 };
        assert_eq!(receptive_field_of([&single(3, 1)]), 3);
        assert_eq!(receptive_field_of([&single(3, 3)]), 7);
        let net = build_dilation_net(32).unwrap();
        // 5×5 stride 1 then 3×3 stride 2: 1 + 4 + 2 = 7
        assert_eq!(receptive_field(&net, 1).unwrap(), 7);
        assert!(receptive_field(&net, 10_000).is_err());
    }
}
