use std::collections::BTreeMap;

use super::TrainConfig;
use crate::error::{Error, Result};
use crate::graph::Gradients;
use crate::params::ParamStore;

/// First and second moment estimates per parameter, plus the step count.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptimizerState {
    pub first: BTreeMap<String, Vec<f32>>,
    pub second: BTreeMap<String, Vec<f32>>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new() -> Self {
        Self::default()
    }
}

/// One bias-corrected Adam update of every parameter that has a gradient.
///
/// All gradients are checked before anything is written, so a non-finite
/// gradient leaves both `params` and `state` untouched.
pub fn adam_step(params: &mut ParamStore, grads: &Gradients, state: &mut OptimizerState, cfg: &TrainConfig) -> Result<()> {
    for (name, g) in grads.iter() {
        if !g.all_finite() {
            return Err(Error::NonFiniteGradient(name.clone()));
        }
        let p = params.get(name)?;
        if p.shape() != g.shape() {
            return Err(Error::shape(
                "adam_step",
                format!("gradient {:?} for `{name}` with shape {:?}", g.shape(), p.shape()),
            ));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (cfg.beta1 as f64, cfg.beta2 as f64);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let (lr, eps) = (cfg.learning_rate as f64, cfg.epsilon as f64);

    for (name, g) in grads.iter() {
        let w = params.get_mut(name)?;
        let v = state.first.entry(name.clone()).or_insert_with(|| vec![0.0; g.numel()]);
        let s = state.second.entry(name.clone()).or_insert_with(|| vec![0.0; g.numel()]);
        for (((wi, vi), si), &gi) in w.data_mut().iter_mut().zip(v.iter_mut()).zip(s.iter_mut()).zip(g.data()) {
            let gi = gi as f64;
            let vn = b1 * *vi as f64 + (1.0 - b1) * gi;
            let sn = b2 * *si as f64 + (1.0 - b2) * gi * gi;
            *vi = vn as f32;
            *si = sn as f32;
            let update = lr * (vn / c1) / ((sn / c2).sqrt() + eps);
            *wi = (*wi as f64 - update) as f32;
        }
    }
    Ok(())
}
