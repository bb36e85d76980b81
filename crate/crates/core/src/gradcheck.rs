//! Registry of finite-difference gradient checks covering every built-in op,
//! every loss and the network heads.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{finite_diff_check, Graph, NodeId, RunningStats};
use crate::dsam::{dsam_forward, DsamParams};
use crate::error::Result;
use crate::losses::{
    action_ce, balanced_ce_map, cc_loss, multitask_total, nss_loss, saliency_total, weighted_bce_sum,
    SaliencyTarget,
};
use crate::model::{action_head, saliency_head, summarization_head, BnParams, ClipHeadParams, ResBlockParams, SaliencyHeadParams};
use crate::task::Task;
use crate::tensor::Tensor;

pub const TOLERANCE: f64 = 1e-4;
pub const EPS: f64 = 1e-6;
pub const DEFAULT_INSTANCES: usize = 20;

pub type Builder = Box<dyn Fn(&mut Graph, &[NodeId]) -> Result<NodeId>>;

/// One random instance: the inputs being differentiated and a scalar-valued
/// graph over them.
pub struct Case {
    pub inputs: Vec<Tensor>,
    pub build: Builder,
}

pub struct GradcheckEntry {
    pub name: String,
    pub kind: &'static str,
    pub case: Box<dyn Fn(&mut ChaCha8Rng) -> Case>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckRow {
    pub name: String,
    pub kind: &'static str,
    pub instances: usize,
    pub max_error: f64,
    /// First error message, when an instance could not be evaluated.
    pub failure: Option<String>,
}

impl GradcheckRow {
    pub fn passed(&self) -> bool {
        self.failure.is_none() && self.max_error < TOLERANCE
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Values bounded away from zero, for ops with a kink there.
fn off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(0.05..1.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Reduces any output to a scalar with fixed random weights.
fn project(g: &mut Graph, y: NodeId, weights: &Tensor) -> Result<NodeId> {
    g.weighted_sum(y, weights.clone())
}

fn entry(name: &str, kind: &'static str, case: impl Fn(&mut ChaCha8Rng) -> Case + 'static) -> GradcheckEntry {
    GradcheckEntry {
        name: name.to_string(),
        kind,
        case: Box::new(case),
    }
}

/// Builds a case for a single op whose output shape is `out_shape`.
fn op_case(
    rng: &mut ChaCha8Rng,
    inputs: Vec<Tensor>,
    out_shape: &[usize],
    op: impl Fn(&mut Graph, &[NodeId]) -> Result<NodeId> + 'static,
) -> Case {
    let w = uniform(rng, out_shape, -1.0, 1.0);
    Case {
        inputs,
        build: Box::new(move |g, x| {
            let y = op(g, x)?;
            project(g, y, &w)
        }),
    }
}

fn random_target(rng: &mut ChaCha8Rng, h: usize, w: usize) -> SaliencyTarget {
    loop {
        let den = uniform(rng, &[h, w], 0.0, 1.0);
        let mut fix = Tensor::zeros(&[h, w]);
        for _ in 0..3 {
            fix.data_mut()[rng.random_range(0..h * w)] = 1.0;
        }
        if let Ok(t) = SaliencyTarget::new(fix, den) {
            return t;
        }
    }
}

fn bn_inputs(rng: &mut ChaCha8Rng, c: usize) -> (Tensor, Tensor, RunningStats) {
    let gamma = uniform(rng, &[c], 0.5, 1.5);
    let beta = uniform(rng, &[c], -0.5, 0.5);
    let stats = RunningStats {
        mean: (0..c).map(|_| rng.random_range(-0.2..0.2)).collect(),
        var: (0..c).map(|_| rng.random_range(0.5..1.5)).collect(),
    };
    (gamma, beta, stats)
}

/// Random inputs for a residual block `c_in -> c_out`; returns the tensors
/// in the order consumed by [`block_from`].
fn block_inputs(rng: &mut ChaCha8Rng, c_in: usize, c_out: usize) -> (Vec<Tensor>, [RunningStats; 3]) {
    let a = uniform(rng, &[c_out, c_in, 3, 3, 3], -0.4, 0.4);
    let (ga, ba, sa) = bn_inputs(rng, c_out);
    let b = uniform(rng, &[c_out, c_out, 3, 3, 3], -0.4, 0.4);
    let (gb, bb, sb) = bn_inputs(rng, c_out);
    let s = uniform(rng, &[c_out, c_in, 1, 1, 1], -0.6, 0.6);
    let (gs, bs, ss) = bn_inputs(rng, c_out);
    (vec![a, ga, ba, b, gb, bb, s, gs, bs], [sa, sb, ss])
}

fn block_from(ids: &[NodeId], stats: &[RunningStats; 3], stride: [usize; 3]) -> ResBlockParams {
    let bn = |k: usize, s: &RunningStats| BnParams {
        gamma: ids[k],
        beta: ids[k + 1],
        stats: s.clone(),
    };
    ResBlockParams {
        a: ids[0],
        bn_a: bn(1, &stats[0]),
        b: ids[3],
        bn_b: bn(4, &stats[1]),
        shortcut: Some((ids[6], bn(7, &stats[2]))),
        stride,
    }
}

fn clip_head_case(rng: &mut ChaCha8Rng, outputs: usize, summary: bool) -> Case {
    let c = 3;
    let x = uniform(rng, &[2, 2, 3, 3], -1.0, 1.0);
    let (mut inputs, stats) = block_inputs(rng, 2, c);
    inputs.insert(0, x);
    inputs.push(uniform(rng, &[outputs, c], -0.8, 0.8));
    inputs.push(uniform(rng, &[outputs], -0.3, 0.3));
    let w = uniform(rng, &[outputs], -1.0, 1.0);
    Case {
        inputs,
        build: Box::new(move |g, ids| {
            let p = ClipHeadParams {
                block: block_from(&ids[1..10], &stats, [1, 1, 1]),
                fc_w: ids[10],
                fc_b: ids[11],
            };
            let y = if summary {
                summarization_head(g, ids[0], &p)?
            } else {
                action_head(g, ids[0], &p)?
            };
            project(g, y, &w)
        }),
    }
}

/// Every registered check: built-in ops first, then losses, then heads.
pub fn registry() -> Vec<GradcheckEntry> {
    let mut r = Vec::new();
    r.push(entry("add", "op", |rng| {
        let ins = vec![uniform(rng, &[2, 3], -1.0, 1.0), uniform(rng, &[2, 3], -1.0, 1.0)];
        op_case(rng, ins, &[2, 3], |g, x| g.add(x[0], x[1]))
    }));
    r.push(entry("sub", "op", |rng| {
        let ins = vec![uniform(rng, &[2, 3], -1.0, 1.0), uniform(rng, &[2, 3], -1.0, 1.0)];
        op_case(rng, ins, &[2, 3], |g, x| g.sub(x[0], x[1]))
    }));
    r.push(entry("mul", "op", |rng| {
        let ins = vec![uniform(rng, &[2, 3], -1.0, 1.0), uniform(rng, &[2, 3], -1.0, 1.0)];
        op_case(rng, ins, &[2, 3], |g, x| g.mul(x[0], x[1]))
    }));
    r.push(entry("scalar_mul", "op", |rng| {
        let c = rng.random_range(-2.0..2.0);
        let ins = vec![uniform(rng, &[4], -1.0, 1.0)];
        op_case(rng, ins, &[4], move |g, x| g.scalar_mul(x[0], c))
    }));
    r.push(entry("add_scalar", "op", |rng| {
        let c = rng.random_range(-2.0..2.0);
        let ins = vec![uniform(rng, &[4], -1.0, 1.0)];
        op_case(rng, ins, &[4], move |g, x| g.add_scalar(x[0], c))
    }));
    r.push(entry("relu", "op", |rng| {
        let ins = vec![off_zero(rng, &[3, 4])];
        op_case(rng, ins, &[3, 4], |g, x| g.relu(x[0]))
    }));
    r.push(entry("sigmoid", "op", |rng| {
        let ins = vec![uniform(rng, &[5], -4.0, 4.0)];
        op_case(rng, ins, &[5], |g, x| g.sigmoid(x[0]))
    }));
    r.push(entry("softplus", "op", |rng| {
        let ins = vec![uniform(rng, &[5], -4.0, 4.0)];
        op_case(rng, ins, &[5], |g, x| g.softplus(x[0]))
    }));
    r.push(entry("ln", "op", |rng| {
        let ins = vec![uniform(rng, &[5], 0.2, 3.0)];
        op_case(rng, ins, &[5], |g, x| g.ln(x[0]))
    }));
    r.push(entry("sum", "op", |rng| {
        let ins = vec![uniform(rng, &[2, 3], -1.0, 1.0)];
        op_case(rng, ins, &[1], |g, x| g.sum(x[0]))
    }));
    r.push(entry("mean", "op", |rng| {
        let ins = vec![uniform(rng, &[2, 3], -1.0, 1.0)];
        op_case(rng, ins, &[1], |g, x| g.mean(x[0]))
    }));
    r.push(entry("reshape", "op", |rng| {
        let ins = vec![uniform(rng, &[2, 3], -1.0, 1.0)];
        op_case(rng, ins, &[3, 2], |g, x| g.reshape(x[0], &[3, 2]))
    }));
    r.push(entry("conv3d", "op", |rng| {
        let ins = vec![uniform(rng, &[2, 3, 4, 5], -1.0, 1.0), uniform(rng, &[3, 2, 3, 3, 3], -0.5, 0.5)];
        // stride (1,2,2), pad 1: [3, 3, 2, 3]
        op_case(rng, ins, &[3, 3, 2, 3], |g, x| g.conv3d(x[0], x[1], [1, 2, 2], [1, 1, 1]))
    }));
    r.push(entry("conv2d_spatial", "op", |rng| {
        let ins = vec![uniform(rng, &[2, 4, 5], -1.0, 1.0), uniform(rng, &[3, 2, 3, 3], -0.5, 0.5)];
        op_case(rng, ins, &[3, 4, 5], |g, x| g.conv2d_spatial(x[0], x[1], [1, 1], [1, 1]))
    }));
    r.push(entry("bias_add", "op", |rng| {
        let ins = vec![uniform(rng, &[3, 2, 2], -1.0, 1.0), uniform(rng, &[3], -1.0, 1.0)];
        op_case(rng, ins, &[3, 2, 2], |g, x| g.bias_add(x[0], x[1]))
    }));
    r.push(entry("temporal_avg_pool", "op", |rng| {
        let ins = vec![uniform(rng, &[2, 3, 2, 2], -1.0, 1.0)];
        op_case(rng, ins, &[2, 2, 2], |g, x| g.temporal_avg_pool(x[0]))
    }));
    r.push(entry("global_temporal_avg_pool", "op", |rng| {
        let ins = vec![uniform(rng, &[3, 2, 2, 2], -1.0, 1.0)];
        op_case(rng, ins, &[3], |g, x| g.global_temporal_avg_pool(x[0]))
    }));
    r.push(entry("upsample_spatial", "op", |rng| {
        let ins = vec![uniform(rng, &[2, 2, 3], -1.0, 1.0)];
        op_case(rng, ins, &[2, 5, 7], |g, x| g.upsample_spatial(x[0], (5, 7)))
    }));
    r.push(entry("spatial_softmax", "op", |rng| {
        let ins = vec![uniform(rng, &[3, 4], -2.0, 2.0)];
        op_case(rng, ins, &[3, 4], |g, x| g.spatial_softmax(x[0]))
    }));
    r.push(entry("softmax_vector", "op", |rng| {
        let ins = vec![uniform(rng, &[6], -2.0, 2.0)];
        op_case(rng, ins, &[6], |g, x| g.softmax_vector(x[0]))
    }));
    r.push(entry("log_softmax", "op", |rng| {
        let ins = vec![uniform(rng, &[6], -2.0, 2.0)];
        op_case(rng, ins, &[6], |g, x| g.log_softmax(x[0]))
    }));
    r.push(entry("pick", "op", |rng| {
        let k = rng.random_range(0..6);
        let ins = vec![uniform(rng, &[6], -2.0, 2.0)];
        op_case(rng, ins, &[1], move |g, x| g.pick(x[0], k))
    }));
    r.push(entry("apply_attention", "op", |rng| {
        let ins = vec![uniform(rng, &[2, 2, 3, 3], -1.0, 1.0), uniform(rng, &[3, 3], 0.0, 0.3)];
        op_case(rng, ins, &[2, 2, 3, 3], |g, x| g.apply_attention(x[0], x[1]))
    }));
    r.push(entry("concat_channels", "op", |rng| {
        let ins = vec![uniform(rng, &[1, 2, 2], -1.0, 1.0), uniform(rng, &[2, 2, 2], -1.0, 1.0)];
        op_case(rng, ins, &[3, 2, 2], |g, x| g.concat_channels(&[x[0], x[1]]))
    }));
    r.push(entry("fully_connected", "op", |rng| {
        let ins = vec![
            uniform(rng, &[4], -1.0, 1.0),
            uniform(rng, &[3, 4], -1.0, 1.0),
            uniform(rng, &[3], -1.0, 1.0),
        ];
        op_case(rng, ins, &[3], |g, x| g.fully_connected(x[0], x[1], x[2]))
    }));
    r.push(entry("batch_norm", "op", |rng| {
        let training = rng.random_bool(0.5);
        let (gamma, beta, stats) = bn_inputs(rng, 2);
        let ins = vec![uniform(rng, &[3, 2, 2, 2], -1.0, 1.0), gamma, beta];
        op_case(rng, ins, &[3, 2, 2, 2], move |g, x| {
            Ok(g.batch_norm(x[0], x[1], x[2], &stats, training)?.0)
        })
    }));
    r.push(entry("standardize", "op", |rng| {
        let ins = vec![uniform(rng, &[3, 3], -1.0, 1.0)];
        op_case(rng, ins, &[3, 3], |g, x| g.standardize(x[0]))
    }));
    r.push(entry("weighted_sum", "op", |rng| {
        let w = uniform(rng, &[2, 3], -1.0, 1.0);
        let ins = vec![uniform(rng, &[2, 3], -1.0, 1.0)];
        op_case(rng, ins, &[1], move |g, x| g.weighted_sum(x[0], w.clone()))
    }));

    r.push(entry("balanced_ce_map", "loss", |rng| {
        let t = random_target(rng, 4, 5);
        Case {
            inputs: vec![uniform(rng, &[4, 5], 0.05, 0.95)],
            build: Box::new(move |g, x| balanced_ce_map(g, x[0], &t.thr)),
        }
    }));
    r.push(entry("cc_loss", "loss", |rng| {
        let t = random_target(rng, 4, 5);
        Case {
            inputs: vec![uniform(rng, &[4, 5], 0.0, 1.0)],
            build: Box::new(move |g, x| cc_loss(g, x[0], &t.den)),
        }
    }));
    r.push(entry("nss_loss", "loss", |rng| {
        let t = random_target(rng, 4, 5);
        Case {
            inputs: vec![uniform(rng, &[4, 5], 0.0, 1.0)],
            build: Box::new(move |g, x| nss_loss(g, x[0], &t.fix)),
        }
    }));
    r.push(entry("saliency_total", "loss", |rng| {
        let t = random_target(rng, 4, 5);
        let inputs = (0..5).map(|_| uniform(rng, &[4, 5], -2.0, 2.0)).collect();
        Case {
            inputs,
            build: Box::new(move |g, x| Ok(saliency_total(g, x, &t, [0.1, 2.0, 1.0])?.total)),
        }
    }));
    r.push(entry("action_ce", "loss", |rng| {
        let k = rng.random_range(0..7);
        Case {
            inputs: vec![uniform(rng, &[7], -3.0, 3.0)],
            build: Box::new(move |g, x| action_ce(g, x[0], k)),
        }
    }));
    r.push(entry("weighted_bce_sum", "loss", |rng| {
        let y = rng.random_range(0.0..1.0);
        Case {
            inputs: vec![uniform(rng, &[1], -4.0, 4.0)],
            build: Box::new(move |g, x| weighted_bce_sum(g, x[0], y, 3.06)),
        }
    }));
    r.push(entry("multitask_total", "loss", |rng| {
        Case {
            inputs: (0..3).map(|_| uniform(rng, &[1], 0.0, 3.0)).collect(),
            build: Box::new(|g, x| {
                multitask_total(
                    g,
                    &[(Task::Saliency, x[0]), (Task::Action, x[1]), (Task::Summary, x[2])],
                    [0.1, 1.0, 1.0],
                )
            }),
        }
    }));

    r.push(entry("dsam", "head", |rng| {
        let inputs = vec![
            uniform(rng, &[3, 2, 3, 4], -1.0, 1.0),
            uniform(rng, &[2, 3, 3, 3], -0.5, 0.5),
            uniform(rng, &[2], 0.1, 0.5),
            uniform(rng, &[1, 2, 1, 1], -1.0, 1.0),
            uniform(rng, &[1], -0.5, 0.5),
        ];
        let (wm, ws, wa) = (
            uniform(rng, &[3, 4], -1.0, 1.0),
            uniform(rng, &[2, 5, 7], -1.0, 1.0),
            uniform(rng, &[5, 7], -1.0, 1.0),
        );
        Case {
            inputs,
            build: Box::new(move |g, x| {
                let p = DsamParams {
                    feat_w: x[1],
                    feat_b: x[2],
                    act_w: x[3],
                    act_b: x[4],
                    level: 1,
                };
                let out = dsam_forward(g, x[0], &p, Some((5, 7)))?;
                let a = project(g, out.m, &wm)?;
                let b = project(g, out.s_up.expect("requested"), &ws)?;
                let c = project(g, out.a_up.expect("requested"), &wa)?;
                let ab = g.add(a, b)?;
                g.add(ab, c)
            }),
        }
    }));
    r.push(entry("saliency_head", "head", |rng| {
        let inputs = vec![
            uniform(rng, &[8, 4, 5], 0.0, 1.0),
            uniform(rng, &[3, 8, 1, 1], -0.6, 0.6),
            uniform(rng, &[3], 0.05, 0.3),
            uniform(rng, &[1, 3, 3, 3], -0.6, 0.6),
            uniform(rng, &[1], -0.3, 0.3),
        ];
        let w = uniform(rng, &[4, 5], -1.0, 1.0);
        Case {
            inputs,
            build: Box::new(move |g, x| {
                let p = SaliencyHeadParams {
                    fuse_w: x[1],
                    fuse_b: x[2],
                    out_w: x[3],
                    out_b: x[4],
                };
                let y = saliency_head(g, x[0], &p)?;
                project(g, y, &w)
            }),
        }
    }));
    r.push(entry("action_head", "head", |rng| clip_head_case(rng, 5, false)));
    r.push(entry("summarization_head", "head", |rng| clip_head_case(rng, 1, true)));
    r
}

/// Runs `instances` random cases of every entry from one seeded generator.
pub fn run_entries(entries: &[GradcheckEntry], instances: usize, seed: u64) -> Vec<GradcheckRow> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    entries
        .iter()
        .map(|e| {
            let mut row = GradcheckRow {
                name: e.name.clone(),
                kind: e.kind,
                instances,
                max_error: 0.0,
                failure: None,
            };
            for _ in 0..instances {
                let case = (e.case)(&mut rng);
                match finite_diff_check(&case.build, &case.inputs, EPS) {
                    Ok(err) => row.max_error = row.max_error.max(err),
                    Err(err) => {
                        row.failure.get_or_insert_with(|| err.to_string());
                    }
                }
            }
            row
        })
        .collect()
}

/// Fixed-width pass/fail table.
pub fn format_table(rows: &[GradcheckRow], elapsed: Duration) -> String {
    let mut out = format!("{:<26} {:<5} {:>9} {:>12}  result\n", "check", "kind", "instances", "max_rel_err");
    for r in rows {
        let result = match &r.failure {
            Some(msg) => format!("FAIL ({msg})"),
            None if r.passed() => "pass".to_string(),
            None => "FAIL".to_string(),
        };
        out.push_str(&format!(
            "{:<26} {:<5} {:>9} {:>12.3e}  {}\n",
            r.name, r.kind, r.instances, r.max_error, result
        ));
    }
    let failed = rows.iter().filter(|r| !r.passed()).count();
    out.push_str(&format!(
        "{} checks, {} failed, {:.1}s\n",
        rows.len(),
        failed,
        elapsed.as_secs_f64()
    ));
    out
}

/// Runs the full registry; returns the rows and the wall time.
pub fn run_all(instances: usize, seed: u64) -> (Vec<GradcheckRow>, Duration) {
    let start = Instant::now();
    let rows = run_entries(&registry(), instances, seed);
    (rows, start.elapsed())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{CustomOp, OP_NAMES};
    use std::sync::Arc;

    #[test]
    fn registry_lists_every_op_once() {
        let reg = registry();
        for op in OP_NAMES {
            assert_eq!(reg.iter().filter(|e| e.name == *op).count(), 1, "{op}");
        }
        let mut names: Vec<&str> = reg.iter().map(|e| e.name.as_str()).collect();
        names.sort_unstable();
        let n = names.len();
        names.dedup();
        assert_eq!(names.len(), n);
    }

    struct BrokenSquare;

    impl CustomOp for BrokenSquare {
        fn name(&self) -> &str {
            "broken_square"
        }

        fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad_out: &Tensor) -> Vec<Tensor> {
            // d(x^2)/dx is 2x; this deliberately drops the factor of 2.
            let g = inputs[0].data().iter().zip(grad_out.data()).map(|(x, go)| x * go).collect();
            vec![Tensor::new(inputs[0].shape().to_vec(), g).expect("same shape")]
        }
    }

    #[test]
    fn corrupted_rule_is_reported() {
        let broken = entry("broken_square", "op", |rng| {
            let ins = vec![uniform(rng, &[4], 0.5, 2.0)];
            op_case(rng, ins, &[4], |g, x| {
                let v = g.value(x[0]).map(|a| a * a);
                g.custom(Arc::new(BrokenSquare), &[x[0]], v)
            })
        });
        let rows = run_entries(&[broken], 3, 1);
        assert!(!rows[0].passed());
        assert!(format_table(&rows, Duration::ZERO).contains("FAIL"));
    }

    #[test]
    fn a_few_instances_of_everything_pass() {
        let rows = run_entries(&registry(), 2, 5);
        for r in &rows {
            assert!(r.passed(), "{r:?}");
        }
    }
}
