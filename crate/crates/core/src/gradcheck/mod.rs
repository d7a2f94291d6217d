//! Central finite-difference verification of analytic gradients.
//!
//! The subgraph under test returns an arbitrary tensor `y`; the checker
//! contracts it with a fixed random probe `c` so the scalar `Σ c·y` is
//! accumulated in `f64` outside the graph. Analytic gradients come from a
//! single vector-Jacobian product seeded with `c`.

pub mod suites;

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::graph::{Graph, ReluPattern, Var};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub use suites::{random_conv_spec, run_scope, Scope, TargetResult, COMPOSITE_TOLERANCE, LINEAR_TOLERANCE};

/// How numeric derivatives are sampled.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Probe {
    /// One central difference per element, optionally on a random subset of
    /// at most this many elements per tensor.
    Elementwise { max_elements: Option<usize> },
    /// Central differences along unit-length whole-tensor directions `u`:
    /// the first is aligned with the signs of the analytic gradient, the rest
    /// have random signs.
    Directional { directions: usize },
}

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub eps: f32,
    pub probe: Probe,
    pub seed: u64,
    /// Evaluate perturbed points with every Relu held to its on/off pattern
    /// at the unperturbed point. The analytic gradient is unchanged, and a
    /// step that crosses a kink no longer corrupts the difference quotient.
    pub freeze_relu: bool,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { eps: 1e-3, probe: Probe::Elementwise { max_elements: None }, seed: 0, freeze_relu: false }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Relative error per parameter, in name order.
    pub per_param: Vec<(String, f64)>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.per_param.iter().map(|(_, e)| *e).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&(String, f64)> {
        self.per_param
            .iter()
            .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap_or(std::cmp::Ordering::Equal))
    }
}

/// Compare analytic and numeric gradients for every tensor in `params`.
///
/// Elementwise, the error of a tensor is `max|a − n| / max(max|a|, max|n|)`
/// over the checked elements. Along a direction `u` it is
/// `|a·u − n_u| / max(|a·u|, |n_u|, Σ|a_i u_i|)`, and a tensor reports its
/// worst direction. Denominators are floored at 1e-6.
pub fn grad_check<F>(params: &ParamStore, mut build: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph, &BTreeMap<String, Var>) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);

    let mut run = |store: &ParamStore, pattern: Option<&ReluPattern>| -> Result<(Graph, Var)> {
        let mut g = pattern.map_or_else(Graph::new, |p| Graph::replaying(p.clone()));
        let vars = store
            .iter()
            .map(|(name, t)| (name.clone(), g.param(name, t.clone())))
            .collect::<BTreeMap<_, _>>();
        let out = build(&mut g, &vars)?;
        Ok((g, out))
    };

    let (g, out) = run(params, None)?;
    let probe = Tensor::uniform(g.value(out).shape(), -1.0, 1.0, &mut rng);
    let analytic = g.backward_with_seed(out, probe.clone())?;
    let pattern = opts.freeze_relu.then(|| g.relu_pattern());
    drop(g);

    let contract = |y: &Tensor| -> f64 {
        y.data()
            .iter()
            .zip(probe.data())
            .map(|(&a, &b)| a as f64 * b as f64)
            .sum()
    };
    // central difference of the contraction along `dir` with step `h`,
    // measured against the step actually taken after f32 rounding
    let mut central = |work: &mut ParamStore, name: &str, dir: &[(usize, f32)], h: f32| -> Result<f64> {
        let orig: Vec<f32> = dir.iter().map(|&(i, _)| work.get(name).map(|t| t.data()[i])).collect::<Result<_>>()?;
        let mut shifted = |sign: f32, work: &mut ParamStore| -> Result<(f64, Vec<f32>)> {
            let t = work.get_mut(name)?;
            for (&(i, u), &o) in dir.iter().zip(&orig) {
                t.data_mut()[i] = o + sign * h * u;
            }
            let taken: Vec<f32> = dir.iter().map(|&(i, _)| t.data()[i]).collect();
            let (g, o) = run(work, pattern.as_ref())?;
            Ok((contract(g.value(o)), taken))
        };
        let (plus, hi) = shifted(1.0, work)?;
        let (minus, lo) = shifted(-1.0, work)?;
        let t = work.get_mut(name)?;
        for (&(i, _), &o) in dir.iter().zip(&orig) {
            t.data_mut()[i] = o;
        }
        let norm_u: f64 = dir.iter().map(|&(_, u)| (u as f64).powi(2)).sum::<f64>().sqrt();
        let taken: f64 = hi.iter().zip(&lo).map(|(&a, &b)| (a as f64 - b as f64).powi(2)).sum::<f64>().sqrt();
        Ok((plus - minus) * norm_u / taken)
    };

    let mut per_param = Vec::new();
    let mut work = params.clone();
    for (name, value) in params.iter() {
        let zeros = Tensor::zeros(value.shape());
        let grad = analytic.get(name).unwrap_or(&zeros).data();
        let err = match opts.probe {
            Probe::Elementwise { max_elements } => {
                let indices: Vec<usize> = match max_elements {
                    Some(k) if k < value.numel() => {
                        let mut idx = sample(&mut rng, value.numel(), k).into_vec();
                        idx.sort_unstable();
                        idx
                    }
                    _ => (0..value.numel()).collect(),
                };
                let (mut max_diff, mut max_a, mut max_n) = (0.0f64, 0.0f64, 0.0f64);
                for &i in &indices {
                    let numeric = central(&mut work, name, &[(i, 1.0)], opts.eps)?;
                    let a = grad[i] as f64;
                    max_diff = max_diff.max((a - numeric).abs());
                    max_a = max_a.max(a.abs());
                    max_n = max_n.max(numeric.abs());
                }
                max_diff / max_a.max(max_n).max(1e-6)
            }
            Probe::Directional { directions } => {
                let mut worst = 0.0f64;
                let unit = 1.0 / (value.numel() as f32).sqrt();
                for k in 0..directions {
                    let dir: Vec<(usize, f32)> = (0..value.numel())
                        .map(|i| {
                            let u = if k == 0 {
                                if grad[i] < 0.0 { -unit } else { unit }
                            } else if rng.gen_bool(0.5) {
                                unit
                            } else {
                                -unit
                            };
                            (i, u)
                        })
                        .collect();
                    let numeric = central(&mut work, name, &dir, opts.eps)?;
                    let a: f64 = dir.iter().map(|&(i, u)| grad[i] as f64 * u as f64).sum();
                    let scale: f64 = dir.iter().map(|&(i, u)| (grad[i] as f64 * u as f64).abs()).sum();
                    let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(scale).max(1e-6);
                    worst = worst.max(err);
                }
                worst
            }
        };
        per_param.push((name.clone(), err));
    }
    Ok(GradCheckReport { per_param })
}

/// Random tensor in `[-1, 1)` drawn from a seeded stream.
pub fn random_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    Tensor::uniform(shape, -1.0, 1.0, rng)
}
