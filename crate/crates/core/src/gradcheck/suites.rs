//! Seeded finite-difference suites over single ops, composite blocks and a
//! whole network.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{grad_check, random_tensor, GradCheckOptions, Probe};
use crate::conv::ConvSpec;
use crate::error::{Error, Result};
use crate::fusion::FusionSpec;
use crate::graph::{BnMode, Graph, RunningMoments, Var};
use crate::network::{
    build_dilation_net, conv_unit_forward, multi_dilation_block_forward, Binder, BnContext, ConvUnit,
    MultiDilationBlockSpec, Variant,
};
use crate::params::{BnStore, ParamStore};
use crate::tensor::Tensor;
use crate::train::bce_l2_loss;

/// Tolerance for ops that are linear in each input taken separately.
pub const LINEAR_TOLERANCE: f64 = 1e-4;
/// Tolerance for nonlinear ops and composites in 32-bit arithmetic.
pub const COMPOSITE_TOLERANCE: f64 = 1e-2;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scope {
    Ops,
    Block,
    Net,
}

impl FromStr for Scope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ops" => Ok(Scope::Ops),
            "block" => Ok(Scope::Block),
            "net" => Ok(Scope::Net),
            _ => Err(Error::InvalidArgument(format!("unknown gradcheck scope `{s}` (ops, block, net)"))),
        }
    }
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scope::Ops => "ops",
            Scope::Block => "block",
            Scope::Net => "net",
        })
    }
}

/// Worst result of one target over all its seeded instances.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetResult {
    pub target: &'static str,
    pub tolerance: f64,
    pub instances: usize,
    pub worst_error: f64,
    pub worst_param: String,
    pub worst_seed: u64,
}

impl TargetResult {
    pub fn passed(&self) -> bool {
        self.worst_error < self.tolerance
    }
}

pub type BuildFn = Box<dyn FnMut(&mut Graph, &BTreeMap<String, Var>) -> Result<Var>>;

/// One random instance: parameters to perturb and the graph built from them.
pub struct Case {
    pub params: ParamStore,
    pub build: BuildFn,
    pub opts: GradCheckOptions,
}

type CaseFn = fn(&mut ChaCha8Rng) -> Result<Case>;

struct Target {
    name: &'static str,
    tolerance: f64,
    make: CaseFn,
}

fn targets(scope: Scope) -> Vec<Target> {
    let t = |name, tolerance, make| Target { name, tolerance, make };
    match scope {
        Scope::Ops => vec![
            t("conv2d", LINEAR_TOLERANCE, conv_case),
            t("dense", LINEAR_TOLERANCE, dense_case),
            t("add_n", LINEAR_TOLERANCE, add_case),
            t("global_avg_pool", LINEAR_TOLERANCE, pool_case),
            t("concat", LINEAR_TOLERANCE, concat_case),
            t("relu", COMPOSITE_TOLERANCE, relu_case),
            t("sigmoid", COMPOSITE_TOLERANCE, sigmoid_case),
            t("batch_norm_train", COMPOSITE_TOLERANCE, bn_train_case),
            t("batch_norm_infer", LINEAR_TOLERANCE, bn_infer_case),
            t("bce", COMPOSITE_TOLERANCE, bce_case),
            t("sum_squares", COMPOSITE_TOLERANCE, sum_squares_case),
        ],
        Scope::Block => vec![
            t("conv_unit", COMPOSITE_TOLERANCE, conv_unit_case),
            t("multi_dilation_block", COMPOSITE_TOLERANCE, block_case),
            t("fusion_head", COMPOSITE_TOLERANCE, fusion_head_case),
            t("bce_l2_loss", COMPOSITE_TOLERANCE, loss_case),
        ],
        Scope::Net => vec![t("dilation_net_a", COMPOSITE_TOLERANCE, net_case)],
    }
}

/// Run every target of `scope` over `instances` seeds starting at `seed`.
pub fn run_scope(scope: Scope, instances: usize, seed: u64) -> Result<Vec<TargetResult>> {
    let mut out = Vec::new();
    for target in targets(scope) {
        let mut res = TargetResult {
            target: target.name,
            tolerance: target.tolerance,
            instances,
            worst_error: 0.0,
            worst_param: String::new(),
            worst_seed: seed,
        };
        for i in 0..instances as u64 {
            let s = seed.wrapping_add(i);
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let mut case = (target.make)(&mut rng)?;
            // the probe must not replay the stream that drew the case data
            case.opts.seed = crate::data::mix_seed(s, 0x0070_726f_6265);
            let report = grad_check(&case.params, &mut case.build, &case.opts)?;
            if let Some((name, err)) = report.worst() {
                if *err >= res.worst_error {
                    res.worst_error = *err;
                    res.worst_param = name.clone();
                    res.worst_seed = s;
                }
            }
        }
        out.push(res);
    }
    Ok(out)
}

fn store(entries: Vec<(&str, Tensor)>) -> ParamStore {
    let mut p = ParamStore::new();
    for (n, t) in entries {
        p.insert(n, t);
    }
    p
}

/// Current values of the perturbed leaves, for code that binds parameters by
/// name through a [`Binder`].
fn snapshot(g: &Graph, vars: &BTreeMap<String, Var>) -> ParamStore {
    let mut p = ParamStore::new();
    for (n, v) in vars {
        p.insert(n.clone(), g.value(*v).clone());
    }
    p
}

fn linear(params: ParamStore, build: impl FnMut(&mut Graph, &BTreeMap<String, Var>) -> Result<Var> + 'static) -> Case {
    // exact for linear maps at any step, so a large one keeps rounding noise down
    Case { params, build: Box::new(build), opts: GradCheckOptions { eps: 0.25, ..Default::default() } }
}

fn smooth(params: ParamStore, build: impl FnMut(&mut Graph, &BTreeMap<String, Var>) -> Result<Var> + 'static) -> Case {
    Case { params, build: Box::new(build), opts: GradCheckOptions::default() }
}

/// Composites are checked along whole-tensor directions on the Relu piece
/// of the unperturbed point.
fn directional(mut case: Case, directions: usize) -> Case {
    case.opts.probe = Probe::Directional { directions };
    case.opts.freeze_relu = true;
    case.opts.eps = 1e-2;
    case
}

/// Values with magnitude in `[0.1, 1)`, kept clear of the Relu kink.
fn away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = rng.gen_range(0.1..1.0f32);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// A legal conv spec and input size drawn at random.
pub fn random_conv_spec(rng: &mut impl Rng, max_spatial: usize) -> (ConvSpec, usize, usize) {
    loop {
        let spec = ConvSpec {
            kernel: [1, 3, 5][rng.gen_range(0..3)],
            stride: rng.gen_range(1..=2),
            dilation: rng.gen_range(1..=3),
            padding: rng.gen_range(0..=3),
            in_channels: rng.gen_range(1..=3),
            out_channels: rng.gen_range(1..=3),
        };
        let h = rng.gen_range(1..=max_spatial);
        let w = rng.gen_range(1..=max_spatial);
        if spec.output_size(h).is_ok() && spec.output_size(w).is_ok() {
            return (spec, h, w);
        }
    }
}

fn conv_case(rng: &mut ChaCha8Rng) -> Result<Case> {
    let (spec, h, w) = random_conv_spec(rng, 8);
    let n = rng.gen_range(1..=2);
    let params = store(vec![
        ("x", random_tensor(&[n, h, w, spec.in_channels], rng)),
        ("w", random_tensor(&spec.weight_shape(), rng)),
        ("b", random_tensor(&[spec.out_channels], rng)),
    ]);
    Ok(linear(params, move |g, v| g.conv2d(v["x"], v["w"], v["b"], &spec)))
}

fn dense_case(rng: &mut ChaCha8Rng) -> Result<Case> {
    let (n, i, o) = (rng.gen_range(1..=4), rng.gen_range(1..=6), rng.gen_range(1..=5));
    let params = store(vec![
        ("x", random_tensor(&[n, i], rng)),
        ("w", random_tensor(&[i, o], rng)),
        ("b", random_tensor(&[o], rng)),
    ]);
    Ok(linear(params, |g, v| g.dense(v["x"], v["w"], v["b"])))
}

fn add_case(rng: &mut ChaCha8Rng) -> Result<Case> {
    let shape = [2, rng.gen_range(1..=4), 3, 2];
    let params = store(vec![
        ("a", random_tensor(&shape, rng)),
        ("b", random_tensor(&shape, rng)),
        ("c", random_tensor(&shape, rng)),
    ]);
    Ok(linear(params, |g, v| g.add_n(&[v["a"], v["b"], v["c"]])))
}

fn pool_case(rng: &mut ChaCha8Rng) -> Result<Case> {
    let shape = [rng.gen_range(1..=3), rng.gen_range(1..=5), rng.gen_range(1..=5), rng.gen_range(1..=4)];
    let params = store(vec![("x", random_tensor(&shape, rng))]);
    Ok(linear(params, |g, v| g.global_avg_pool(v["x"])))
}

fn concat_case(rng: &mut ChaCha8Rng) -> Result<Case> {
    let n = rng.gen_range(1..=3);
    let params = store(vec![
        ("a", random_tensor(&[n, rng.gen_range(1..=4)], rng)),
        ("b", random_tensor(&[n, rng.gen_range(1..=4)], rng)),
    ]);
    Ok(linear(params, |g, v| g.concat(&[v["a"], v["b"]])))
}

fn relu_case(rng: &mut ChaCha8Rng) -> Result<Case> {
    let params = store(vec![("x", away_from_zero(&[3, 4], rng))]);
    Ok(smooth(params, |g, v| Ok(g.relu(v["x"]))))
}

fn sigmoid_case(rng: &mut ChaCha8Rng) -> Result<Case> {
    let params = store(vec![("x", Tensor::uniform(&[3, 4], -4.0, 4.0, rng))]);
    Ok(smooth(params, |g, v| Ok(g.sigmoid(v["x"]))))
}

fn bn_params(rng: &mut ChaCha8Rng) -> (ParamStore, usize) {
    let c = rng.gen_range(1..=3);
    let shape = [rng.gen_range(2..=3), 2, 2, c];
    let params = store(vec![
        ("x", random_tensor(&shape, rng)),
        ("gamma", Tensor::uniform(&[c], 0.5, 1.5, rng)),
        ("beta", random_tensor(&[c], rng)),
    ]);
    (params, c)
}

fn bn_train_case(rng: &mut ChaCha8Rng) -> Result<Case> {
    let (params, c) = bn_params(rng);
    Ok(smooth(params, move |g, v| {
        let mut rm = RunningMoments::new(c);
        g.batch_norm(v["x"], v["gamma"], v["beta"], &mut rm, BnMode::Train)
    }))
}

fn bn_infer_case(rng: &mut ChaCha8Rng) -> Result<Case> {
    let (params, c) = bn_params(rng);
    let rm = RunningMoments {
        mean: (0..c).map(|_| rng.gen_range(-0.5..0.5)).collect(),
        var: (0..c).map(|_| rng.gen_range(0.5..2.0)).collect(),
    };
    Ok(linear(params, move |g, v| {
        g.batch_norm(v["x"], v["gamma"], v["beta"], &mut rm.clone(), BnMode::Infer)
    }))
}

fn bce_case(rng: &mut ChaCha8Rng) -> Result<Case> {
    let n = rng.gen_range(1..=6);
    let labels = Tensor::from_fn(&[n, 1], |_| rng.gen_range(0..2) as f32);
    let params = store(vec![("p", Tensor::uniform(&[n, 1], 0.1, 0.9, rng))]);
    Ok(smooth(params, move |g, v| g.bce(v["p"], &labels)))
}

fn sum_squares_case(rng: &mut ChaCha8Rng) -> Result<Case> {
    let params = store(vec![("a", random_tensor(&[3, 2], rng)), ("b", random_tensor(&[4], rng))]);
    Ok(smooth(params, |g, v| Ok(g.sum_squares(&[v["a"], v["b"]]))))
}

fn unit_params(units: &[ConvUnit], rng: &mut ChaCha8Rng) -> (ParamStore, BnStore) {
    let mut p = ParamStore::new();
    let mut bn = BnStore::new();
    for u in units {
        p.insert(format!("{}.w", u.name), Tensor::uniform(&u.spec.weight_shape(), -0.5, 0.5, rng));
        p.insert(format!("{}.b", u.name), Tensor::uniform(&[u.spec.out_channels], -0.1, 0.1, rng));
        if u.batch_norm {
            let c = u.spec.out_channels;
            p.insert(format!("{}.bn.gamma", u.name), Tensor::uniform(&[c], 0.5, 1.5, rng));
            p.insert(format!("{}.bn.beta", u.name), random_tensor(&[c], rng));
            bn.insert(format!("{}.bn", u.name), RunningMoments::new(c));
        }
    }
    (p, bn)
}

fn conv_unit_case(rng: &mut ChaCha8Rng) -> Result<Case> {
    let d = rng.gen_range(1..=2);
    let unit = ConvUnit { name: "unit".into(), spec: ConvSpec::same(3, d, 2, 3), batch_norm: true };
    let (mut params, bn) = unit_params(std::slice::from_ref(&unit), rng);
    params.insert("x", random_tensor(&[2, 6, 6, 2], rng));
    Ok(directional(
        smooth(params, move |g, v| {
        let p = snapshot(g, v);
        let mut bn = bn.clone();
        let mut ctx = BnContext::new(&mut bn, BnMode::Train);
        conv_unit_forward(g, v["x"], &unit, Binder::trainable(&p), &mut ctx)
        }),
        4,
    ))
}

pub fn block_case(rng: &mut ChaCha8Rng) -> Result<Case> {
    let spec = MultiDilationBlockSpec {
        name: "block".into(),
        in_channels: 2,
        out_channels: 3,
        branch_kernel: 3,
        max_dilation: rng.gen_range(1..=2),
        batch_norm: true,
    };
    let (mut params, bn) = unit_params(&spec.units(), rng);
    params.insert("x", random_tensor(&[2, 8, 8, 2], rng));
    Ok(directional(
        smooth(params, move |g, v| {
            let p = snapshot(g, v);
            let mut bn = bn.clone();
            let mut ctx = BnContext::new(&mut bn, BnMode::Train);
            multi_dilation_block_forward(g, v["x"], &spec, Binder::trainable(&p), &mut ctx)
        }),
        4,
    ))
}

pub fn fusion_head_case(rng: &mut ChaCha8Rng) -> Result<Case> {
    let head = FusionSpec::new(&[Variant::A, Variant::B])?.head(6);
    let mut params = head.init_params(rng);
    for d in &head.layers {
        params.insert(format!("{}.b", d.name), Tensor::uniform(&[d.outputs], 0.05, 0.2, rng));
    }
    params.insert("f", random_tensor(&[3, 6], rng));
    Ok(directional(
        smooth(params, move |g, v| {
            let p = snapshot(g, v);
            head.forward(g, v["f"], Binder::trainable(&p))
        }),
        4,
    ))
}

pub fn loss_case(rng: &mut ChaCha8Rng) -> Result<Case> {
    let n = rng.gen_range(2..=5);
    let labels = Tensor::from_fn(&[n, 1], |i| (i % 2) as f32);
    let lambda = rng.gen_range(0.01..0.5f32);
    let params = store(vec![
        ("x", random_tensor(&[n, 3], rng)),
        ("d.w", random_tensor(&[3, 1], rng)),
        ("d.b", random_tensor(&[1], rng)),
    ]);
    Ok(directional(
        smooth(params, move |g, v| {
        let y = g.dense(v["x"], v["d.w"], v["d.b"])?;
        let p = g.sigmoid(y);
        Ok(bce_l2_loss(g, p, &labels, &[v["d.w"]], lambda)?.total)
        }),
        4,
    ))
}

fn net_case(rng: &mut ChaCha8Rng) -> Result<Case> {
    let net = build_dilation_net(Variant::A.resolution())?;
    let (params, bn) = net.init_params(rng);
    let x = Tensor::uniform(&[2, 32, 32, 3], 0.0, 1.0, rng);
    Ok(directional(
        smooth(params, move |g, v| {
            let p = snapshot(g, v);
            let mut bn = bn.clone();
            let mut ctx = BnContext::new(&mut bn, BnMode::Train);
            let xi = g.input(x.clone());
            net.forward(g, xi, Binder::trainable(&p), &mut ctx)
        }),
        4,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scope_parses() {
        assert_eq!("OPS".parse::<Scope>().unwrap(), Scope::Ops);
        assert!("all".parse::<Scope>().is_err());
    }
}
