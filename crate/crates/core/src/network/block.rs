use super::{Activation, Binder, BnContext, ConvUnit, DenseSpec, Layer, MultiDilationBlockSpec, NetStructure};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};

/// conv → Relu → batch norm.
pub fn conv_unit_forward(
    g: &mut Graph,
    x: Var,
    unit: &ConvUnit,
    binder: Binder<'_>,
    bn: &mut BnContext<'_>,
) -> Result<Var> {
    let w = binder.bind(g, &format!("{}.w", unit.name))?;
    let b = binder.bind(g, &format!("{}.b", unit.name))?;
    let y = g.conv2d(x, w, b, &unit.spec)?;
    let y = g.relu(y);
    if !unit.batch_norm {
        return Ok(y);
    }
    let gamma = binder.bind(g, &format!("{}.bn.gamma", unit.name))?;
    let beta = binder.bind(g, &format!("{}.bn.beta", unit.name))?;
    let mode = bn.mode;
    let moments = bn.moments(&format!("{}.bn", unit.name))?;
    g.batch_norm(y, gamma, beta, moments, mode)
}

/// Chained dilated branches `y_k = unit_k(y_{k−1})` for `k = 1..=m`, summed,
/// then the stride-2 shifter and the channel-expanding shifter.
pub fn multi_dilation_block_forward(
    g: &mut Graph,
    x: Var,
    spec: &MultiDilationBlockSpec,
    binder: Binder<'_>,
    bn: &mut BnContext<'_>,
) -> Result<Var> {
    let shape = g.value(x).shape().to_vec();
    if shape.len() != 4 {
        return Err(Error::shape("multi_dilation_block", format!("expected rank 4, got {shape:?}")));
    }
    spec.validate(shape[1].min(shape[2]))?;

    let mut prev = x;
    let mut branches = Vec::with_capacity(spec.max_dilation);
    for k in 1..=spec.max_dilation {
        prev = conv_unit_forward(g, prev, &spec.branch(k), binder, bn)?;
        branches.push(prev);
    }
    let sum = g.add_n(&branches)?;
    let down = conv_unit_forward(g, sum, &spec.shifter_down(), binder, bn)?;
    conv_unit_forward(g, down, &spec.shifter_expand(), binder, bn)
}

pub fn dense_forward(g: &mut Graph, x: Var, spec: &DenseSpec, binder: Binder<'_>) -> Result<Var> {
    let w = binder.bind(g, &format!("{}.w", spec.name))?;
    let b = binder.bind(g, &format!("{}.b", spec.name))?;
    let y = g.dense(x, w, b)?;
    Ok(match spec.activation {
        Activation::Identity => y,
        Activation::Relu => g.relu(y),
        Activation::Sigmoid => g.sigmoid(y),
    })
}

/// `sigmoid(relu(f·W₁ + b₁)·W₂ + b₂)` on pooled features `(n, channels)`.
pub fn classifier_head_forward(g: &mut Graph, f: Var, net: &NetStructure, binder: Binder<'_>) -> Result<Var> {
    let head: Vec<&DenseSpec> = net.layers[net.pool_index() + 1..]
        .iter()
        .filter_map(|l| match l {
            Layer::Dense(d) => Some(d),
            _ => None,
        })
        .collect();
    if head.len() != 2 {
        return Err(Error::InvalidArgument(format!(
            "classifier head must have two dense layers, found {}",
            head.len()
        )));
    }
    let fv = g.value(f);
    if fv.rank() != 2 || fv.shape()[1] != head[0].inputs {
        return Err(Error::shape(
            "classifier_head",
            format!("features {:?}, head expects (batch, {})", fv.shape(), head[0].inputs),
        ));
    }
    let mut x = f;
    for d in head {
        x = dense_forward(g, x, d, binder)?;
    }
    Ok(x)
}
