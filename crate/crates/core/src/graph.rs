//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every primitive as it executes. Nodes are appended in
//! execution order, so the tape is already topologically sorted and
//! [`Graph::backward`] is a single reverse sweep.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::conv::{conv2d_backward, conv2d_forward, ConvGeometry, ConvSpec};
use crate::error::{Error, Result};
use crate::gemm::{sgemm, Trans};
use crate::tensor::Tensor;

pub const BN_EPSILON: f32 = 1e-5;
pub const BN_MOMENTUM: f32 = 0.9;

/// Lower bound applied to predictions before taking logarithms in [`Graph::bce`].
pub const PROB_CLAMP: f32 = 1e-7;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BnMode {
    Train,
    Infer,
    /// Normalize by batch moments as in `Train`, but add `n·mean` and
    /// `n·var` of each batch of `n` samples to the running store, so a pass
    /// over a dataset yields sample-weighted mean batch moments once divided
    /// by the sample count.
    Accumulate,
}

/// Per-channel running statistics of one batch-norm layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunningMoments {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
}

impl RunningMoments {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }
}

enum Op {
    Leaf,
    Conv2d { x: Var, w: Var, b: Var, geo: ConvGeometry },
    Relu { x: Var, mask: Vec<bool> },
    Sigmoid { x: Var },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f32>, inv_std: Vec<f32>, mode: BnMode },
    AddN { xs: Vec<Var> },
    GlobalAvgPool { x: Var },
    Dense { x: Var, w: Var, b: Var },
    Concat { xs: Vec<Var>, widths: Vec<usize> },
    Sum { x: Var },
    Bce { pred: Var, labels: Vec<f32> },
    SumSquares { xs: Vec<Var> },
    Scale { x: Var, factor: f32 },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    name: Option<String>,
}

/// Gradients keyed by parameter name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients(BTreeMap<String, Tensor>);

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.0.get(name)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.0.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.0.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.0.keys().map(String::as_str)
    }

    fn accumulate(&mut self, name: &str, grad: Tensor) {
        match self.0.get_mut(name) {
            Some(g) => g.add_assign(&grad),
            None => {
                self.0.insert(name.to_owned(), grad);
            }
        }
    }
}

/// Relu on/off patterns in call order, used to hold a graph on one linear
/// piece while finite-differencing it.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ReluPattern(pub Vec<Vec<bool>>);

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    replay: Option<(ReluPattern, usize)>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// A graph whose Relu calls follow `pattern` instead of their inputs.
    pub fn replaying(pattern: ReluPattern) -> Self {
        Self { nodes: Vec::new(), replay: Some((pattern, 0)) }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad, name: None });
        Var(self.nodes.len() - 1)
    }

    /// Named parameter leaves in registration order.
    pub fn params(&self) -> Vec<(&str, Var)> {
        self.nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match (&n.op, &n.name) {
                (Op::Leaf, Some(name)) => Some((name.as_str(), Var(i))),
                _ => None,
            })
            .collect()
    }

    /// Constant leaf; never receives a gradient.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: false, name: None });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf; its gradient is reported under `name`.
    pub fn param(&mut self, name: &str, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
            name: Some(name.to_owned()),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, spec: &ConvSpec) -> Result<Var> {
        let geo = ConvGeometry::new(self.value(x), self.value(w), self.value(b), spec)?;
        let out = conv2d_forward(&geo, self.value(x), self.value(w), self.value(b));
        Ok(self.push(out, Op::Conv2d { x, w, b, geo }, &[x, w, b]))
    }

    /// In a replaying graph the next recorded on/off pattern is used
    /// instead of the sign of the input.
    pub fn relu(&mut self, x: Var) -> Var {
        let n = self.value(x).numel();
        let replayed = self.replay.as_mut().and_then(|(p, cursor)| {
            let m = p.0.get(*cursor).filter(|m| m.len() == n).cloned();
            *cursor += 1;
            m
        });
        let xv = self.value(x);
        let mask = replayed.unwrap_or_else(|| xv.data().iter().map(|&v| v > 0.0).collect());
        let mut out = xv.clone();
        for (o, &on) in out.data_mut().iter_mut().zip(&mask) {
            if !on {
                *o = 0.0;
            }
        }
        self.push(out, Op::Relu { x, mask }, &[x])
    }

    /// On/off patterns of every Relu so far, in call order.
    pub fn relu_pattern(&self) -> ReluPattern {
        ReluPattern(
            self.nodes
                .iter()
                .filter_map(|n| match &n.op {
                    Op::Relu { mask, .. } => Some(mask.clone()),
                    _ => None,
                })
                .collect(),
        )
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        self.push(out, Op::Sigmoid { x }, &[x])
    }

    /// Batch normalization over every axis but the last.
    ///
    /// In [`BnMode::Train`] the batch moments are used and `running` is
    /// updated as an exponential moving average with [`BN_MOMENTUM`]; in
    /// [`BnMode::Infer`] `running` is read only.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: &mut RunningMoments,
        mode: BnMode,
    ) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.channels();
        for (what, v) in [("gamma", gamma), ("beta", beta)] {
            if self.value(v).shape() != [c] {
                return Err(Error::shape(
                    "batch_norm",
                    format!("{what} shape {:?} but input has {c} channels", self.value(v).shape()),
                ));
            }
        }
        if running.channels() != c {
            return Err(Error::shape(
                "batch_norm",
                format!("running moments hold {} channels, input has {c}", running.channels()),
            ));
        }
        let rows = xv.numel() / c;
        let (mean, var) = match mode {
            BnMode::Train => {
                let (mean, var) = channel_moments(xv.data(), c);
                for ch in 0..c {
                    running.mean[ch] = BN_MOMENTUM * running.mean[ch] + (1.0 - BN_MOMENTUM) * mean[ch];
                    running.var[ch] = BN_MOMENTUM * running.var[ch] + (1.0 - BN_MOMENTUM) * var[ch];
                }
                (mean, var)
            }
            BnMode::Accumulate => {
                let (mean, var) = channel_moments(xv.data(), c);
                let n = xv.shape()[0] as f32;
                for ch in 0..c {
                    running.mean[ch] += n * mean[ch];
                    running.var[ch] += n * var[ch];
                }
                (mean, var)
            }
            BnMode::Infer => (running.mean.clone(), running.var.clone()),
        };
        let inv_std: Vec<f32> = var.iter().map(|v| 1.0 / (v + BN_EPSILON).sqrt()).collect();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![0.0f32; xv.numel()];
        let mut out = vec![0.0f32; xv.numel()];
        for r in 0..rows {
            let base = r * c;
            for ch in 0..c {
                let h = (xv.data()[base + ch] - mean[ch]) * inv_std[ch];
                xhat[base + ch] = h;
                out[base + ch] = g[ch] * h + bt[ch];
            }
        }
        let out = Tensor::new(xv.shape().to_vec(), out)?;
        Ok(self.push(out, Op::BatchNorm { x, gamma, beta, xhat, inv_std, mode }, &[x, gamma, beta]))
    }

    pub fn add_n(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs.first().ok_or_else(|| Error::Empty("add_n of zero inputs".into()))?;
        let mut acc = self.value(first).clone();
        for &v in &xs[1..] {
            if self.value(v).shape() != acc.shape() {
                return Err(Error::shape(
                    "add_n",
                    format!("{:?} vs {:?}", self.value(v).shape(), acc.shape()),
                ));
            }
            acc.add_assign(self.value(v));
        }
        Ok(self.push(acc, Op::AddN { xs: xs.to_vec() }, xs))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() != 4 {
            return Err(Error::shape("global_avg_pool", format!("expected rank 4, got {:?}", xv.shape())));
        }
        let &[n, h, w, c] = xv.shape() else { unreachable!() };
        let area = (h * w) as f64;
        let mut out = vec![0.0f32; n * c];
        for b in 0..n {
            let mut acc = vec![0.0f64; c];
            for px in xv.data()[b * h * w * c..][..h * w * c].chunks_exact(c) {
                for (a, v) in acc.iter_mut().zip(px) {
                    *a += *v as f64;
                }
            }
            for (o, a) in out[b * c..][..c].iter_mut().zip(acc) {
                *o = (a / area) as f32;
            }
        }
        let out = Tensor::new(vec![n, c], out)?;
        Ok(self.push(out, Op::GlobalAvgPool { x }, &[x]))
    }

    /// `x · w + b` for `x: (n, in)`, `w: (in, out)`, `b: (out)`.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        if xv.rank() != 2 || wv.rank() != 2 || xv.shape()[1] != wv.shape()[0] {
            return Err(Error::shape(
                "dense",
                format!("cannot multiply {:?} by {:?}", xv.shape(), wv.shape()),
            ));
        }
        let (n, k, m) = (xv.shape()[0], wv.shape()[0], wv.shape()[1]);
        if bv.shape() != [m] {
            return Err(Error::shape("dense", format!("bias shape {:?}, expected [{m}]", bv.shape())));
        }
        let mut out = Vec::with_capacity(n * m);
        for _ in 0..n {
            out.extend_from_slice(bv.data());
        }
        sgemm(n, k, m, xv.data(), Trans::No, wv.data(), Trans::No, 1.0, &mut out);
        let out = Tensor::new(vec![n, m], out)?;
        Ok(self.push(out, Op::Dense { x, w, b }, &[x, w, b]))
    }

    /// Concatenate along the trailing (feature / channel) axis.
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs.first().ok_or_else(|| Error::Empty("concat of zero inputs".into()))?;
        let lead = self.value(first).shape()[..self.value(first).rank() - 1].to_vec();
        let mut widths = Vec::with_capacity(xs.len());
        for &v in xs {
            let s = self.value(v).shape();
            if s[..s.len() - 1] != lead[..] {
                return Err(Error::shape(
                    "concat",
                    format!("leading dims {:?} vs {:?}", &s[..s.len() - 1], lead),
                ));
            }
            widths.push(s[s.len() - 1]);
        }
        let rows: usize = lead.iter().product();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&v, &wd) in xs.iter().zip(&widths) {
                out.extend_from_slice(&self.value(v).data()[r * wd..][..wd]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let out = Tensor::new(shape, out)?;
        Ok(self.push(out, Op::Concat { xs: xs.to_vec(), widths }, xs))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().map(|&v| v as f64).sum();
        self.push(Tensor::scalar(s as f32), Op::Sum { x }, &[x])
    }

    /// Mean binary cross-entropy of `pred` against `labels` (same shape).
    /// Predictions are clamped to `[PROB_CLAMP, 1 − PROB_CLAMP]` first.
    pub fn bce(&mut self, pred: Var, labels: &Tensor) -> Result<Var> {
        let pv = self.value(pred);
        if pv.shape() != labels.shape() {
            return Err(Error::shape(
                "bce",
                format!("prediction {:?} vs label {:?}", pv.shape(), labels.shape()),
            ));
        }
        let n = pv.numel() as f64;
        let total: f64 = pv
            .data()
            .iter()
            .zip(labels.data())
            .map(|(&p, &y)| {
                let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP) as f64;
                let y = y as f64;
                -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
            })
            .sum();
        let out = Tensor::scalar((total / n) as f32);
        Ok(self.push(out, Op::Bce { pred, labels: labels.data().to_vec() }, &[pred]))
    }

    /// `Σ x²` over every element of every input.
    pub fn sum_squares(&mut self, xs: &[Var]) -> Var {
        let s: f64 = xs
            .iter()
            .flat_map(|&v| self.value(v).data().iter())
            .map(|&v| (v as f64) * (v as f64))
            .sum();
        self.push(Tensor::scalar(s as f32), Op::SumSquares { xs: xs.to_vec() }, xs)
    }

    pub fn scale(&mut self, x: Var, factor: f32) -> Var {
        let out = self.value(x).map(|v| v * factor);
        self.push(out, Op::Scale { x, factor }, &[x])
    }

    /// Gradients of a scalar `loss` with respect to every named parameter it
    /// depends on, seeded with 1.0.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::shape("backward", format!("loss must be scalar, got {:?}", lv.shape())));
        }
        self.backward_with_seed(loss, Tensor::full(lv.shape(), 1.0))
    }

    /// Vector-Jacobian product: propagates `seed` (shaped like `out`) back to
    /// every named parameter.
    pub fn backward_with_seed(&self, out: Var, seed: Tensor) -> Result<Gradients> {
        if seed.shape() != self.value(out).shape() {
            return Err(Error::shape(
                "backward",
                format!("seed {:?} vs output {:?}", seed.shape(), self.value(out).shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=out.0).map(|_| None).collect();
        grads[out.0] = Some(seed);
        let mut result = Gradients::default();

        for idx in (0..=out.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let mut send = |v: Var, t: Tensor| match &mut grads[v.0] {
                Some(acc) => acc.add_assign(&t),
                slot @ None => *slot = Some(t),
            };
            match &node.op {
                Op::Leaf => {
                    if let Some(name) = &node.name {
                        result.accumulate(name, g);
                    }
                }
                Op::Conv2d { x, w, b, geo } => {
                    let need = [self.requires_grad(*x), self.requires_grad(*w), self.requires_grad(*b)];
                    let cg = conv2d_backward(geo, self.value(*x), self.value(*w), &g, need);
                    if let Some(t) = cg.input {
                        send(*x, t);
                    }
                    if let Some(t) = cg.weights {
                        send(*w, t);
                    }
                    if let Some(t) = cg.bias {
                        send(*b, t);
                    }
                }
                Op::Relu { x, mask } => {
                    let mut d = g;
                    for (gv, &on) in d.data_mut().iter_mut().zip(mask) {
                        if !on {
                            *gv = 0.0;
                        }
                    }
                    send(*x, d);
                }
                Op::Sigmoid { x } => {
                    let mut d = g;
                    for (gv, &s) in d.data_mut().iter_mut().zip(node.value.data()) {
                        *gv *= s * (1.0 - s);
                    }
                    send(*x, d);
                }
                Op::BatchNorm { x, gamma, beta, xhat, inv_std, mode } => {
                    let c = inv_std.len();
                    let rows = g.numel() / c;
                    let gy = g.data();
                    let mut dgamma = vec![0.0f64; c];
                    let mut dbeta = vec![0.0f64; c];
                    for r in 0..rows {
                        for ch in 0..c {
                            let i = r * c + ch;
                            dgamma[ch] += (gy[i] * xhat[i]) as f64;
                            dbeta[ch] += gy[i] as f64;
                        }
                    }
                    if self.requires_grad(*x) {
                        let gm = self.value(*gamma).data();
                        let mut dx = vec![0.0f32; g.numel()];
                        match mode {
                            BnMode::Train | BnMode::Accumulate => {
                                let m = rows as f32;
                                for r in 0..rows {
                                    for ch in 0..c {
                                        let i = r * c + ch;
                                        let dxhat = gy[i] * gm[ch];
                                        let mean_dxhat = (dbeta[ch] as f32) * gm[ch] / m;
                                        let mean_dxhat_xhat = (dgamma[ch] as f32) * gm[ch] / m;
                                        dx[i] = inv_std[ch] * (dxhat - mean_dxhat - xhat[i] * mean_dxhat_xhat);
                                    }
                                }
                            }
                            BnMode::Infer => {
                                for r in 0..rows {
                                    for ch in 0..c {
                                        let i = r * c + ch;
                                        dx[i] = gy[i] * gm[ch] * inv_std[ch];
                                    }
                                }
                            }
                        }
                        send(*x, Tensor::new(g.shape().to_vec(), dx)?);
                    }
                    let to_t = |v: Vec<f64>| Tensor::new(vec![c], v.into_iter().map(|x| x as f32).collect());
                    if self.requires_grad(*gamma) {
                        send(*gamma, to_t(dgamma)?);
                    }
                    if self.requires_grad(*beta) {
                        send(*beta, to_t(dbeta)?);
                    }
                }
                Op::AddN { xs } => {
                    for &v in xs {
                        if self.requires_grad(v) {
                            send(v, g.clone());
                        }
                    }
                }
                Op::GlobalAvgPool { x } => {
                    let &[n, h, w, c] = self.value(*x).shape() else { unreachable!() };
                    let inv = 1.0 / (h * w) as f32;
                    let mut dx = vec![0.0f32; n * h * w * c];
                    for b in 0..n {
                        let gb = &g.data()[b * c..][..c];
                        for px in dx[b * h * w * c..][..h * w * c].chunks_exact_mut(c) {
                            for (d, gv) in px.iter_mut().zip(gb) {
                                *d = gv * inv;
                            }
                        }
                    }
                    send(*x, Tensor::new(vec![n, h, w, c], dx)?);
                }
                Op::Dense { x, w, b } => {
                    let (xv, wv) = (self.value(*x), self.value(*w));
                    let (n, k, m) = (xv.shape()[0], wv.shape()[0], wv.shape()[1]);
                    if self.requires_grad(*x) {
                        let mut dx = vec![0.0f32; n * k];
                        sgemm(n, m, k, g.data(), Trans::No, wv.data(), Trans::Yes, 0.0, &mut dx);
                        send(*x, Tensor::new(vec![n, k], dx)?);
                    }
                    if self.requires_grad(*w) {
                        let mut dw = vec![0.0f32; k * m];
                        sgemm(k, n, m, xv.data(), Trans::Yes, g.data(), Trans::No, 0.0, &mut dw);
                        send(*w, Tensor::new(vec![k, m], dw)?);
                    }
                    if self.requires_grad(*b) {
                        let mut db = vec![0.0f32; m];
                        for row in g.data().chunks_exact(m) {
                            for (d, v) in db.iter_mut().zip(row) {
                                *d += v;
                            }
                        }
                        send(*b, Tensor::new(vec![m], db)?);
                    }
                }
                Op::Concat { xs, widths } => {
                    let total: usize = widths.iter().sum();
                    let rows = g.numel() / total;
                    let mut offset = 0;
                    for (&v, &wd) in xs.iter().zip(widths) {
                        if self.requires_grad(v) {
                            let mut part = Vec::with_capacity(rows * wd);
                            for r in 0..rows {
                                part.extend_from_slice(&g.data()[r * total + offset..][..wd]);
                            }
                            send(v, Tensor::new(self.value(v).shape().to_vec(), part)?);
                        }
                        offset += wd;
                    }
                }
                Op::Sum { x } => {
                    let gv = g.item();
                    send(*x, Tensor::full(self.value(*x).shape(), gv));
                }
                Op::Bce { pred, labels } => {
                    let gv = g.item();
                    let pv = self.value(*pred);
                    let n = pv.numel() as f32;
                    let d = pv
                        .data()
                        .iter()
                        .zip(labels)
                        .map(|(&p, &y)| {
                            let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
                            gv * (p - y) / (p * (1.0 - p)) / n
                        })
                        .collect();
                    send(*pred, Tensor::new(pv.shape().to_vec(), d)?);
                }
                Op::SumSquares { xs } => {
                    let gv = g.item();
                    for &v in xs {
                        if self.requires_grad(v) {
                            send(v, self.value(v).map(|x| 2.0 * gv * x));
                        }
                    }
                }
                Op::Scale { x, factor } => {
                    let f = *factor;
                    send(*x, g.map(|v| v * f));
                }
            }
        }
        Ok(result)
    }
}

pub fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Biased per-channel mean and variance over all leading axes.
fn channel_moments(data: &[f32], c: usize) -> (Vec<f32>, Vec<f32>) {
    let rows = data.len() / c;
    let mut mean = vec![0.0f64; c];
    for px in data.chunks_exact(c) {
        for (m, v) in mean.iter_mut().zip(px) {
            *m += *v as f64;
        }
    }
    mean.iter_mut().for_each(|m| *m /= rows as f64);
    let mut var = vec![0.0f64; c];
    for px in data.chunks_exact(c) {
        for ((s, v), m) in var.iter_mut().zip(px).zip(&mean) {
            let d = *v as f64 - m;
            *s += d * d;
        }
    }
    (
        mean.into_iter().map(|m| m as f32).collect(),
        var.into_iter().map(|s| (s / rows as f64) as f32).collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_values_and_gradient() {
        let mut g = Graph::new();
        let x = g.param("x", Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap());
        let y = g.relu(x);
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get("x").unwrap().data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn all_negative_relu_has_zero_gradient() {
        let mut g = Graph::new();
        let x = g.param("x", Tensor::full(&[2, 3], -0.5));
        let y = g.relu(x);
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        assert!(grads.get("x").unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sigmoid_at_zero_and_symmetry() {
        assert_eq!(sigmoid(0.0), 0.5);
        for x in [-3.0f32, -0.2, 0.7, 5.0] {
            assert!((sigmoid(x) + sigmoid(-x) - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::new();
        let x = g.param("x", Tensor::from_fn(&[2, 2, 2, 1], |i| i as f32));
        let s = g.sum(x);
        let grads = g.backward(s).unwrap();
        assert!(grads.get("x").unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.param("x", Tensor::ones(&[2, 2]));
        let y = g.relu(x);
        assert!(g.backward(y).is_err());
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let x = g.input(Tensor::ones(&[1, 2]));
        let w = g.param("w", Tensor::ones(&[2, 1]));
        let b = g.input(Tensor::zeros(&[1]));
        let y = g.dense(x, w, b).unwrap();
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.len(), 1);
        assert!(grads.contains("w"));
    }

    #[test]
    fn batch_norm_zero_variance_is_finite() {
        let mut g = Graph::new();
        let x = g.input(Tensor::full(&[4, 2, 2, 3], 3.0));
        let gamma = g.param("g", Tensor::ones(&[3]));
        let beta = g.param("b", Tensor::zeros(&[3]));
        let mut rm = RunningMoments::new(3);
        let y = g.batch_norm(x, gamma, beta, &mut rm, BnMode::Train).unwrap();
        assert!(g.value(y).all_finite());
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn batch_norm_updates_running_moments_only_in_train_mode() {
        let data = Tensor::from_fn(&[8, 1, 1, 2], |i| i as f32);
        let mut rm = RunningMoments::new(2);
        let mut g = Graph::new();
        let x = g.input(data.clone());
        let gamma = g.input(Tensor::ones(&[2]));
        let beta = g.input(Tensor::zeros(&[2]));
        g.batch_norm(x, gamma, beta, &mut rm, BnMode::Infer).unwrap();
        assert_eq!(rm, RunningMoments::new(2));
        g.batch_norm(x, gamma, beta, &mut rm, BnMode::Train).unwrap();
        // channel 0 holds 0,2,..,14: mean 7, biased variance 21
        assert!((rm.mean[0] - 0.7).abs() < 1e-6);
        assert!((rm.var[0] - (0.9 + 0.1 * 21.0)).abs() < 1e-5);
    }

    #[test]
    fn accumulate_mode_sums_weighted_batch_moments() {
        let mut rm = RunningMoments { mean: vec![0.0], var: vec![0.0] };
        let mut g = Graph::new();
        let gamma = g.input(Tensor::ones(&[1]));
        let beta = g.input(Tensor::zeros(&[1]));
        // batches {1,3} and {10}: means 2 and 10, biased variances 1 and 0
        let a = g.input(Tensor::new(vec![2, 1], vec![1.0, 3.0]).unwrap());
        let b = g.input(Tensor::new(vec![1, 1], vec![10.0]).unwrap());
        let ya = g.batch_norm(a, gamma, beta, &mut rm, BnMode::Accumulate).unwrap();
        g.batch_norm(b, gamma, beta, &mut rm, BnMode::Accumulate).unwrap();
        assert_eq!(g.value(ya).data(), &[-1.0 / (1.0f32 + BN_EPSILON).sqrt(), 1.0 / (1.0f32 + BN_EPSILON).sqrt()]);
        assert_eq!(rm.mean, vec![2.0 * 2.0 + 10.0]);
        assert_eq!(rm.var, vec![2.0 * 1.0]);
    }
}
