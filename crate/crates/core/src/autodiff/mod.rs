//! Tensor ops with reverse-mode automatic differentiation.

mod graph;
pub(crate) mod kernels;

pub use graph::{
    CustomOp, Graph, NodeId, RunningStats, BATCH_NORM_EPS, BATCH_NORM_MOMENTUM, LN_FLOOR, OP_NAMES,
};
pub(crate) use graph::mean_std;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Compares analytic gradients of a scalar-valued graph against central
/// finite differences.
///
/// `build` receives one trainable node per entry of `inputs` and must return a
/// scalar root. The result is the largest
/// `|analytic - numeric| / max(1, |numeric|)` over every input element.
pub fn finite_diff_check<F>(build: F, inputs: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = values.iter().map(|v| g.param(v.clone())).collect();
        let root = build(&mut g, &ids)?;
        Ok(g.value(root).item())
    };

    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|v| g.param(v.clone())).collect();
    let root = build(&mut g, &ids)?;
    g.backward(root)?;
    let analytic: Vec<Tensor> = ids
        .iter()
        .zip(inputs)
        .map(|(&id, v)| g.grad(id).cloned().unwrap_or_else(|| Tensor::zeros(v.shape())))
        .collect();

    let mut worst = 0.0f64;
    let mut values = inputs.to_vec();
    for (k, grad) in analytic.iter().enumerate() {
        for j in 0..values[k].len() {
            let orig = values[k].data()[j];
            values[k].data_mut()[j] = orig + eps;
            let plus = eval(&values)?;
            values[k].data_mut()[j] = orig - eps;
            let minus = eval(&values)?;
            values[k].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let err = (grad.data()[j] - numeric).abs() / numeric.abs().max(1.0);
            if !err.is_finite() {
                return Err(Error::Numeric(format!("non-finite gradient error at input {k}[{j}]")));
            }
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
