//! Training losses. Each loss records its computation in a [`Graph`] so that
//! gradients flow back into the network; `*_value` helpers evaluate the same
//! composition on plain tensors.

use crate::autodiff::{mean_std, Graph, NodeId};
use crate::error::{Error, Result};
use crate::task::Task;
use crate::tensor::Tensor;

/// Relative threshold for binarizing dense saliency maps.
pub const DENSE_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    /// Saliency sub-loss weights for CE, CC and NSS.
    pub w: [f64; 3],
    /// Task weights for saliency, action and summarization.
    pub alpha: [f64; 3],
    /// Positive-class weight of the summarization BCE.
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            w: [0.1, 2.0, 1.0],
            alpha: [0.1, 1.0, 1.0],
            gamma: 3.06,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = self.w.iter().chain(&self.alpha).chain(std::iter::once(&self.gamma));
        if all.clone().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Config("loss weights must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// Ground truth for one saliency frame.
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyTarget {
    /// Binary fixation map.
    pub fix: Tensor,
    /// Dense map in `[0, 1]`.
    pub den: Tensor,
    /// Binarized dense map.
    pub thr: Tensor,
}

impl SaliencyTarget {
    pub fn new(fix: Tensor, den: Tensor) -> Result<Self> {
        fix.check_same_shape(&den, "saliency target")?;
        if fix.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::Data("fixation map must be binary".into()));
        }
        let thr = threshold_dense(&den, DENSE_THRESHOLD)?;
        Ok(SaliencyTarget { fix, den, thr })
    }
}

/// 1 where `den >= θ·max(den)`, else 0.
pub fn threshold_dense(den: &Tensor, theta: f64) -> Result<Tensor> {
    if den.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::Data("dense map values must lie in [0, 1]".into()));
    }
    if !(0.0..=1.0).contains(&theta) {
        return Err(Error::Config(format!("threshold {theta} outside [0, 1]")));
    }
    let peak = den.max();
    if peak <= 0.0 {
        return Err(Error::DegenerateTarget("dense map is all zero".into()));
    }
    let cut = theta * peak;
    Ok(den.map(|v| if v >= cut { 1.0 } else { 0.0 }))
}

/// Class-balance weight: the fraction of negative pixels.
pub fn balance_beta(y_thr: &Tensor) -> Result<f64> {
    let pos = y_thr.data().iter().filter(|&&v| v == 1.0).count();
    let neg = y_thr.data().iter().filter(|&&v| v == 0.0).count();
    if pos + neg != y_thr.len() {
        return Err(Error::Data("thresholded map must be binary".into()));
    }
    if pos == 0 || neg == 0 {
        return Err(Error::DegenerateTarget(format!(
            "thresholded map has {pos} positive and {neg} negative pixels"
        )));
    }
    Ok(neg as f64 / (pos + neg) as f64)
}

fn one_minus(g: &mut Graph, p: NodeId) -> Result<NodeId> {
    let neg = g.scalar_mul(p, -1.0)?;
    g.add_scalar(neg, 1.0)
}

/// `−β Σ₊ ln P − (1−β) Σ₋ ln(1−P)` for probabilities `P`.
pub fn balanced_ce_map(g: &mut Graph, p: NodeId, y_thr: &Tensor) -> Result<NodeId> {
    g.value(p).check_same_shape(y_thr, "balanced_ce_map")?;
    let beta = balance_beta(y_thr)?;
    let log_p = g.ln(p)?;
    let q = one_minus(g, p)?;
    let log_q = g.ln(q)?;
    let pos = g.weighted_sum(log_p, y_thr.map(|y| -beta * y))?;
    let neg = g.weighted_sum(log_q, y_thr.map(|y| -(1.0 - beta) * (1.0 - y)))?;
    g.add(pos, neg)
}

/// Negative Pearson correlation between `P` and `Y_den`.
pub fn cc_loss(g: &mut Graph, p: NodeId, y_den: &Tensor) -> Result<NodeId> {
    g.value(p).check_same_shape(y_den, "cc_loss")?;
    let (mu, sd) =
        mean_std(y_den.data()).ok_or_else(|| Error::ZeroVariance("dense target map is constant".into()))?;
    let n = y_den.len() as f64;
    let z = g.standardize(p)?;
    g.weighted_sum(z, y_den.map(|y| -(y - mu) / sd / n))
}

/// Negative mean of the standardized prediction at fixated pixels.
pub fn nss_loss(g: &mut Graph, p: NodeId, y_fix: &Tensor) -> Result<NodeId> {
    g.value(p).check_same_shape(y_fix, "nss_loss")?;
    let nf = y_fix.sum();
    if nf < 1.0 {
        return Err(Error::DegenerateTarget("no fixations in target".into()));
    }
    let z = g.standardize(p)?;
    g.weighted_sum(z, y_fix.map(|y| -y / nf))
}

/// Per-metric saliency loss totals, each summed over `S^F` and `A^1..A^4`.
#[derive(Debug, Clone, Copy)]
pub struct SaliencyLoss {
    pub ce: NodeId,
    pub cc: NodeId,
    pub nss: NodeId,
    pub total: NodeId,
}

/// Deeply supervised saliency loss. `maps` are logit maps (the fused map
/// followed by the per-level activation maps); each is passed through a
/// sigmoid before entering the three sub-losses.
pub fn saliency_total(g: &mut Graph, maps: &[NodeId], target: &SaliencyTarget, w: [f64; 3]) -> Result<SaliencyLoss> {
    if maps.is_empty() {
        return Err(Error::Contract("saliency_total needs at least one map".into()));
    }
    let mut terms: [Vec<NodeId>; 3] = Default::default();
    for &m in maps {
        let p = g.sigmoid(m)?;
        terms[0].push(balanced_ce_map(g, p, &target.thr)?);
        terms[1].push(cc_loss(g, p, &target.den)?);
        terms[2].push(nss_loss(g, p, &target.fix)?);
    }
    let mut totals = [maps[0]; 3];
    for (k, ts) in terms.iter().enumerate() {
        let mut acc = ts[0];
        for &t in &ts[1..] {
            acc = g.add(acc, t)?;
        }
        totals[k] = acc;
    }
    let mut total = g.scalar_mul(totals[0], w[0])?;
    for k in 1..3 {
        let t = g.scalar_mul(totals[k], w[k])?;
        total = g.add(total, t)?;
    }
    Ok(SaliencyLoss {
        ce: totals[0],
        cc: totals[1],
        nss: totals[2],
        total,
    })
}

/// `−ln softmax(logits)[class]`.
pub fn action_ce(g: &mut Graph, logits: NodeId, class: usize) -> Result<NodeId> {
    let n = g.value(logits).len();
    if class >= n {
        return Err(Error::Data(format!("class {class} out of range for {n} logits")));
    }
    let ls = g.log_softmax(logits)?;
    let picked = g.pick(ls, class)?;
    g.scalar_mul(picked, -1.0)
}

/// `−γ·y·ln σ(z) − (1−y)·ln(1−σ(z))`, via softplus for stability.
pub fn weighted_bce_sum(g: &mut Graph, logit: NodeId, y: f64, gamma: f64) -> Result<NodeId> {
    if !(0.0..=1.0).contains(&y) {
        return Err(Error::Data(format!("importance target {y} outside [0, 1]")));
    }
    if !g.value(logit).is_scalar() {
        return Err(Error::dim("summarization logit must be a scalar"));
    }
    let neg = g.scalar_mul(logit, -1.0)?;
    let sp_neg = g.softplus(neg)?;
    let sp = g.softplus(logit)?;
    let a = g.scalar_mul(sp_neg, gamma * y)?;
    let b = g.scalar_mul(sp, 1.0 - y)?;
    g.add(a, b)
}

/// `Σ α_task · L` over the given per-sample task losses.
pub fn multitask_total(g: &mut Graph, losses: &[(Task, NodeId)], alpha: [f64; 3]) -> Result<NodeId> {
    let mut total: Option<NodeId> = None;
    for &(task, l) in losses {
        let t = g.scalar_mul(l, alpha[task.index()])?;
        total = Some(match total {
            Some(acc) => g.add(acc, t)?,
            None => t,
        });
    }
    total.ok_or_else(|| Error::Contract("multitask_total needs at least one task loss".into()))
}

fn eval_map_loss(
    p: &Tensor,
    f: impl FnOnce(&mut Graph, NodeId) -> Result<NodeId>,
) -> Result<f64> {
    let mut g = Graph::new();
    let id = g.constant(p.clone());
    let out = f(&mut g, id)?;
    Ok(g.value(out).item())
}

pub fn balanced_ce_value(p: &Tensor, y_thr: &Tensor) -> Result<f64> {
    eval_map_loss(p, |g, id| balanced_ce_map(g, id, y_thr))
}

pub fn cc_value(p: &Tensor, y_den: &Tensor) -> Result<f64> {
    eval_map_loss(p, |g, id| cc_loss(g, id, y_den))
}

pub fn nss_value(p: &Tensor, y_fix: &Tensor) -> Result<f64> {
    eval_map_loss(p, |g, id| nss_loss(g, id, y_fix))
}
