use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Scalar loss nodes, kept separate so the regularization share can be
/// reported on its own.
#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub total: Var,
    pub cross_entropy: Var,
    pub l2: Var,
}

/// Mean binary cross-entropy plus `λ/(2n)·Σw²`, where `n` is the batch size
/// and `weights` are the decayed kernels only.
pub fn bce_l2_loss(g: &mut Graph, pred: Var, labels: &Tensor, weights: &[Var], lambda: f32) -> Result<LossParts> {
    if labels.data().iter().any(|&y| y != 0.0 && y != 1.0) {
        return Err(Error::InvalidArgument("labels must be 0 or 1".into()));
    }
    let n = labels.shape()[0] as f32;
    let cross_entropy = g.bce(pred, labels)?;
    let squares = g.sum_squares(weights);
    let l2 = g.scale(squares, lambda / (2.0 * n));
    let total = g.add_n(&[cross_entropy, l2])?;
    Ok(LossParts { total, cross_entropy, l2 })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn half_predictions_cost_ln2() {
        let mut g = Graph::new();
        let p = g.param("p", Tensor::full(&[4, 1], 0.5));
        let y = Tensor::new(vec![4, 1], vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let parts = bce_l2_loss(&mut g, p, &y, &[], 0.0).unwrap();
        assert!((g.value(parts.total).item() - std::f32::consts::LN_2).abs() < 1e-6);
    }

    #[test]
    fn exact_predictions_cost_nearly_nothing() {
        let mut g = Graph::new();
        let y = Tensor::new(vec![3, 1], vec![0.0, 1.0, 1.0]).unwrap();
        let p = g.param("p", y.clone());
        let parts = bce_l2_loss(&mut g, p, &y, &[], 0.0).unwrap();
        assert!(g.value(parts.total).item() <= 1e-6);
    }

    #[test]
    fn rejects_soft_labels() {
        let mut g = Graph::new();
        let p = g.param("p", Tensor::full(&[1, 1], 0.5));
        let y = Tensor::full(&[1, 1], 0.3);
        assert!(bce_l2_loss(&mut g, p, &y, &[], 0.0).is_err());
    }
}
