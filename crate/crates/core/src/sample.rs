//! One training clip with the annotation of exactly one task, and the
//! per-sample weighted loss it induces.

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::losses::{action_ce, saliency_total, weighted_bce_sum, LossWeights, SaliencyTarget};
use crate::model::{Binding, Susinet};
use crate::task::{Task, TaskSet};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub enum Target {
    /// Target maps of the clip's median frame.
    Saliency(SaliencyTarget),
    Action(usize),
    /// Importance averaged over the clip's frames.
    Summary(f64),
}

impl Target {
    pub fn task(&self) -> Task {
        match self {
            Target::Saliency(_) => Task::Saliency,
            Target::Action(_) => Task::Action,
            Target::Summary(_) => Task::Summary,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedClip {
    /// `[3, T, H, W]`
    pub clip: Tensor,
    pub target: Target,
}

impl AnnotatedClip {
    pub fn task(&self) -> Task {
        self.target.task()
    }
}

/// Records `α_task · L_task` for one clip, running only the head of the
/// clip's task.
pub fn sample_loss(
    g: &mut Graph,
    model: &Susinet,
    sample: &AnnotatedClip,
    weights: &LossWeights,
) -> Result<(NodeId, Binding)> {
    let task = sample.task();
    let (out, binding) = model.forward(g, &sample.clip, TaskSet::only(task))?;
    let missing = || Error::Contract(format!("{task} output missing"));
    let raw = match &sample.target {
        Target::Saliency(target) => {
            let s_f = out.s_f.ok_or_else(missing)?;
            let levels = out.a_levels.ok_or_else(missing)?;
            let mut maps = vec![s_f];
            maps.extend_from_slice(&levels);
            saliency_total(g, &maps, target, weights.w)?.total
        }
        Target::Action(class) => action_ce(g, out.action_logits.ok_or_else(missing)?, *class)?,
        Target::Summary(y) => weighted_bce_sum(g, out.sum_logit.ok_or_else(missing)?, *y, weights.gamma)?,
    };
    let loss = g.scalar_mul(raw, weights.alpha[task.index()])?;
    Ok((loss, binding))
}
