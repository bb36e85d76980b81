//! Acceptance criteria, run in order in one test so that the runtime limits
//! are measured without other tests competing for the CPU. Each criterion
//! prints one PASS/FAIL line.

mod common;

use std::collections::BTreeSet;
use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{
    check_action_protocol, check_saliency_protocol, check_summary_protocol, ensure, path_str, run_bin, small_model,
    snapshot, synth_record, Check, TINY_CONFIG,
};
use susinet::autodiff::{Graph, NodeId};
use susinet::config::RunConfig;
use susinet::data::{synth_generate, SynthConfig};
use susinet::eval::evaluate;
use susinet::gradcheck::run_all;
use susinet::losses::{
    action_ce, balance_beta, balanced_ce_map, cc_value, nss_value, weighted_bce_sum, LossWeights, SaliencyTarget,
};
use susinet::metrics::{auc_judd, knapsack_select, roc_auc_frames, select_summary, shuffled_auc, SUMMARY_BUDGET};
use susinet::model::{ModelParams, NetworkConfig, Partition, Susinet};
use susinet::optim::{Optimizer, OptimizerConfig};
use susinet::sample::{sample_loss, AnnotatedClip, Target};
use susinet::task::{Task, TaskSet};
use susinet::train::{train, EpochStats};
use susinet::Tensor;

fn report(id: usize, title: &str, elapsed: Duration, outcome: &Check) {
    let status = if outcome.is_ok() { "PASS" } else { "FAIL" };
    let detail = match outcome {
        Ok(()) => String::new(),
        Err(e) => format!(": {e}"),
    };
    // Written to the real stdout so the line survives output capture.
    let mut out = std::io::stdout().lock();
    writeln!(out, "criterion {id} {status} {title} ({:.1}s){detail}", elapsed.as_secs_f64()).unwrap();
}

fn within(limit: Duration, elapsed: Duration) -> Check {
    ensure!(elapsed <= limit, "took {:.1}s, limit {:.0}s", elapsed.as_secs_f64(), limit.as_secs_f64());
    Ok(())
}

// ---------------------------------------------------------------- 1

fn gradient_suite() -> Check {
    let start = Instant::now();
    let (rows, _) = run_all(20, 2024);
    let failed: Vec<String> = rows
        .iter()
        .filter(|r| !r.passed())
        .map(|r| format!("{} ({:.2e})", r.name, r.max_error))
        .collect();
    ensure!(failed.is_empty(), "failing checks: {}", failed.join(", "));
    ensure!(rows.iter().all(|r| r.instances >= 20), "fewer than 20 instances");
    within(Duration::from_secs(120), start.elapsed())
}

// ---------------------------------------------------------------- 2

/// Fraction of (positive, negative) pairs ordered correctly, ties one half.
fn pairwise_auc(pos: &[f64], neg: &[f64]) -> f64 {
    let mut s = 0.0;
    for &p in pos {
        for &n in neg {
            s += if p > n {
                1.0
            } else if p == n {
                0.5
            } else {
                0.0
            };
        }
    }
    s / (pos.len() * neg.len()) as f64
}

/// Best total `score * len` over every subset that fits the budget.
fn exhaustive_knapsack(lengths: &[usize], scores: &[f64], budget: usize) -> f64 {
    let n = lengths.len();
    let mut best = 0.0f64;
    for mask in 0u32..(1 << n) {
        let (mut len, mut value) = (0, 0.0);
        for i in 0..n {
            if mask & (1 << i) != 0 {
                len += lengths[i];
                value += scores[i] * lengths[i] as f64;
            }
        }
        if len <= budget {
            best = best.max(value);
        }
    }
    best
}

/// Scores drawn from a small grid so ties are common.
fn grid_value(rng: &mut ChaCha8Rng) -> f64 {
    rng.random_range(0..12) as f64 / 11.0
}

fn metric_oracles() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for case in 0..100 {
        let (h, w) = (rng.random_range(3..9), rng.random_range(3..9));
        let p = Tensor::from_fn(&[h, w], |_| grid_value(&mut rng));
        let mut fix = Tensor::zeros(&[h, w]);
        let k = rng.random_range(1..h * w);
        for _ in 0..k {
            fix.data_mut()[rng.random_range(0..h * w)] = 1.0;
        }
        let (mut pos, mut neg) = (Vec::new(), Vec::new());
        for (&v, &f) in p.data().iter().zip(fix.data()) {
            if f > 0.0 { pos.push(v) } else { neg.push(v) }
        }
        if !neg.is_empty() {
            let got = auc_judd(&p, &fix).map_err(|e| e.to_string())?;
            let want = pairwise_auc(&pos, &neg);
            ensure!((got - want).abs() <= 1e-12, "auc_judd case {case}: {got} vs {want}");
        }

        let pts = |rng: &mut ChaCha8Rng, n: usize| -> Vec<(usize, usize)> {
            (0..n).map(|_| (rng.random_range(0..w), rng.random_range(0..h))).collect()
        };
        let (k_own, k_other) = (rng.random_range(1..6), rng.random_range(1..12));
        let own = pts(&mut rng, k_own);
        let others = pts(&mut rng, k_other);
        let own_set: BTreeSet<(usize, usize)> = own.iter().copied().collect();
        let neg_set: BTreeSet<(usize, usize)> = others.iter().copied().filter(|q| !own_set.contains(q)).collect();
        let at = |&(x, y): &(usize, usize)| p.data()[y * w + x];
        if !neg_set.is_empty() {
            let got = shuffled_auc(&p, &own, &others).map_err(|e| e.to_string())?;
            let want = pairwise_auc(
                &own_set.iter().map(at).collect::<Vec<_>>(),
                &neg_set.iter().map(at).collect::<Vec<_>>(),
            );
            ensure!((got - want).abs() <= 1e-12, "shuffled_auc case {case}: {got} vs {want}");
        }

        let n = rng.random_range(2..40);
        let scores: Vec<f64> = (0..n).map(|_| grid_value(&mut rng)).collect();
        let mut labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
        labels[0] = true;
        labels[1] = false;
        let (pos, neg): (Vec<(f64, bool)>, Vec<(f64, bool)>) =
            scores.iter().copied().zip(labels.iter().copied()).partition(|x| x.1);
        let got = roc_auc_frames(&scores, &labels).map_err(|e| e.to_string())?;
        let want = pairwise_auc(
            &pos.iter().map(|x| x.0).collect::<Vec<_>>(),
            &neg.iter().map(|x| x.0).collect::<Vec<_>>(),
        );
        ensure!((got - want).abs() <= 1e-12, "roc_auc_frames case {case}: {got} vs {want}");
    }

    for case in 0..300 {
        let n = 1 + case % 12;
        let lengths: Vec<usize> = (0..n).map(|_| rng.random_range(1..40)).collect();
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        let budget = rng.random_range(0..lengths.iter().sum::<usize>() + 5);
        let chosen = knapsack_select(&lengths, &scores, budget).map_err(|e| e.to_string())?;
        let used: usize = chosen.iter().map(|&i| lengths[i]).sum();
        ensure!(used <= budget, "knapsack case {case} uses {used} of {budget}");
        ensure!(chosen.windows(2).all(|p| p[0] < p[1]), "knapsack case {case} indices not increasing");
        let value: f64 = chosen.iter().map(|&i| scores[i] * lengths[i] as f64).sum();
        let best = exhaustive_knapsack(&lengths, &scores, budget);
        ensure!((value - best).abs() <= 1e-12 * best.max(1.0), "knapsack case {case}: {value} vs {best}");
    }
    within(Duration::from_secs(60), start.elapsed())
}

// ---------------------------------------------------------------- 3

fn loss_identities() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for case in 0..50 {
        let n = rng.random_range(2..200);
        let pos = rng.random_range(1..n);
        let mut y = vec![0.0; n];
        y[..pos].iter_mut().for_each(|v| *v = 1.0);
        let y_thr = Tensor::from_vec(y);
        let beta = balance_beta(&y_thr).map_err(|e| e.to_string())?;
        let neg = n - pos;
        // Exact in rational arithmetic: beta * pos == (1 - beta) * neg iff
        // beta == neg / n, and the division is correctly rounded.
        ensure!(beta == neg as f64 / n as f64, "case {case}: beta {beta} for {pos}/{neg}");

        // At P = 1/2 both sides weigh ln 2 equally: total = 2 ln2 * pos * neg / n.
        let mut g = Graph::new();
        let p = g.constant(Tensor::full(&[n], 0.5));
        let l = balanced_ce_map(&mut g, p, &y_thr).map_err(|e| e.to_string())?;
        let want = 2.0 * std::f64::consts::LN_2 * (pos * neg) as f64 / n as f64;
        let got = g.value(l).item();
        ensure!((got - want).abs() <= 1e-12 * want.max(1.0), "case {case}: balanced CE {got} vs {want}");
    }

    for case in 0..50 {
        let (h, w) = (rng.random_range(4..12), rng.random_range(4..12));
        let p = Tensor::from_fn(&[h, w], |_| rng.random_range(0.0..1.0));
        let den = Tensor::from_fn(&[h, w], |_| rng.random_range(0.0..1.0));
        let mut fix = Tensor::zeros(&[h, w]);
        for _ in 0..rng.random_range(1..5) {
            fix.data_mut()[rng.random_range(0..h * w)] = 1.0;
        }
        let a = rng.random_range(0.1..10.0);
        let b = rng.random_range(-5.0..5.0);
        let q = p.map(|v| a * v + b);
        let (c0, c1) = (cc_value(&p, &den).unwrap(), cc_value(&q, &den).unwrap());
        let (n0, n1) = (nss_value(&p, &fix).unwrap(), nss_value(&q, &fix).unwrap());
        ensure!((c0 - c1).abs() <= 1e-10, "case {case}: CC {c0} vs {c1} after affine map");
        ensure!((n0 - n1).abs() <= 1e-10, "case {case}: NSS {n0} vs {n1} after affine map");
    }

    let mut g = Graph::new();
    let z = g.constant(Tensor::scalar(0.0));
    let l = weighted_bce_sum(&mut g, z, 1.0, 3.06).map_err(|e| e.to_string())?;
    let want = 3.06 * std::f64::consts::LN_2;
    ensure!((g.value(l).item() - want).abs() <= 1e-12, "weighted BCE {} vs {want}", g.value(l).item());

    for classes in [2usize, 4, 51, 101] {
        for c in [0, classes - 1] {
            let mut g = Graph::new();
            let z = g.constant(Tensor::full(&[classes], 1.7));
            let l = action_ce(&mut g, z, c).map_err(|e| e.to_string())?;
            let want = (classes as f64).ln();
            ensure!((g.value(l).item() - want).abs() <= 1e-12, "uniform CE for {classes} classes");
        }
    }
    Ok(())
}

// ---------------------------------------------------------------- 4

fn optim_net() -> NetworkConfig {
    NetworkConfig {
        frames: 2,
        height: 32,
        width: 32,
        widths: [4, 4, 8, 8],
        head_width: 3,
        classes: 4,
        sal_channels: 4,
        fuse_channels: 2,
        heads: TaskSet::all(),
    }
}

fn random_sample(rng: &mut ChaCha8Rng, task: Task) -> AnnotatedClip {
    let clip = Tensor::from_fn(&[3, 2, 32, 32], |_| rng.random_range(0.0..1.0));
    let target = match task {
        Task::Saliency => {
            let (cy, cx) = (rng.random_range(4.0..28.0), rng.random_range(4.0..28.0));
            let den = Tensor::from_fn(&[32, 32], |i| {
                let (y, x) = ((i / 32) as f64, (i % 32) as f64);
                (-((y - cy) * (y - cy) + (x - cx) * (x - cx)) / 32.0).exp()
            });
            let mut fix = Tensor::zeros(&[32, 32]);
            fix.data_mut()[(cy as usize) * 32 + cx as usize] = 1.0;
            let den = den.map(|v| v / den.max());
            Target::Saliency(SaliencyTarget::new(fix, den).unwrap())
        }
        Task::Action => Target::Action(rng.random_range(0..4)),
        Task::Summary => Target::Summary(rng.random_range(0.0..1.0)),
    };
    AnnotatedClip { clip, target }
}

/// Synchronous reference: one graph holding the summed loss of every sample,
/// then `p - lr * (grad / B + wd * p)` with each partition's own divisor.
fn synchronous_step(model: &Susinet, samples: &[AnnotatedClip], cfg: &OptimizerConfig) -> ModelParams {
    let weights = LossWeights::default();
    let mut g = Graph::new();
    let mut total: Option<NodeId> = None;
    let mut bindings = Vec::new();
    for s in samples {
        let (l, b) = sample_loss(&mut g, model, s, &weights).unwrap();
        total = Some(match total {
            Some(acc) => g.add(acc, l).unwrap(),
            None => l,
        });
        bindings.push(b);
    }
    g.backward(total.unwrap()).unwrap();
    let mut out = model.params().clone();
    for i in 0..out.len() {
        let p = model.params().get(i);
        let divisor = match p.partition {
            Partition::Shared => cfg.shared_window(),
            Partition::Saliency => cfg.batch[0],
            Partition::Action => cfg.batch[1],
            Partition::Summary => cfg.batch[2],
        } as f64;
        let mut grad = Tensor::zeros(p.value.shape());
        for b in &bindings {
            if let Some(gr) = b.node_of(i).and_then(|id| g.grad(id)) {
                grad.add_assign(gr).unwrap();
            }
        }
        let v = Tensor::from_fn(p.value.shape(), |k| {
            let old = p.value.data()[k];
            old - cfg.lr * (grad.data()[k] / divisor + cfg.weight_decay * old)
        });
        out.set_value(i, v).unwrap();
    }
    out
}

fn optimizer_properties() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    for (trial, batch) in [[1, 1, 1], [2, 2, 2], [2, 1, 3]].into_iter().enumerate() {
        let cfg = OptimizerConfig {
            batch,
            ..OptimizerConfig::default()
        };
        let model = Susinet::new(optim_net(), 100 + trial as u64).unwrap();
        let mut samples = Vec::new();
        for t in Task::ALL {
            for _ in 0..batch[t.index()] {
                samples.push(random_sample(&mut rng, t));
            }
        }
        // Interleave tasks the way the training stream does.
        samples.sort_by_key(|s| s.task().index());
        let mut order: Vec<AnnotatedClip> = Vec::new();
        let mut queues: Vec<Vec<AnnotatedClip>> = Task::ALL
            .iter()
            .map(|t| samples.iter().filter(|s| s.task() == *t).cloned().collect())
            .collect();
        while queues.iter().any(|q| !q.is_empty()) {
            for q in queues.iter_mut() {
                if !q.is_empty() {
                    order.push(q.remove(0));
                }
            }
        }

        let mut params = model.params().clone();
        let mut opt = Optimizer::new(cfg.clone(), &params).map_err(|e| e.to_string())?;
        let mut events = 0;
        for s in &order {
            opt.accumulate(&model, s, &LossWeights::default()).map_err(|e| e.to_string())?;
            events += opt.maybe_step(&mut params).map_err(|e| e.to_string())?.len();
        }
        ensure!(events == 4, "trial {trial}: {events} updates for one aligned window");
        let want = synchronous_step(&model, &order, &cfg);
        for i in 0..params.len() {
            let d = params.get(i).value.max_abs_diff(&want.get(i).value);
            ensure!(d <= 1e-10, "trial {trial}: {} differs by {d:e}", params.get(i).name);
        }
    }

    for task in Task::ALL {
        let mut model = Susinet::new(optim_net(), 7).unwrap();
        let before = model.params().clone();
        let cfg = OptimizerConfig {
            batch: [1, 1, 1],
            lr: 1e-3,
            ..OptimizerConfig::default()
        };
        let mut opt = Optimizer::new(cfg, model.params()).map_err(|e| e.to_string())?;
        let steps = 500;
        for _ in 0..steps {
            let s = random_sample(&mut rng, task);
            opt.accumulate(&model, &s, &LossWeights::default()).map_err(|e| e.to_string())?;
            opt.maybe_step(model.params_mut()).map_err(|e| e.to_string())?;
        }
        let views = model.params().partition();
        for other in Task::ALL.into_iter().filter(|t| *t != task) {
            for &i in views.get(Partition::of_task(other)) {
                let (a, b) = (&model.params().get(i).value, &before.get(i).value);
                let same = a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits());
                ensure!(same, "{task}-only training moved {}", model.params().get(i).name);
            }
        }
        let own = views.get(Partition::of_task(task));
        ensure!(
            own.iter().any(|&i| model.params().get(i).value != before.get(i).value),
            "{task}-only training left its own head unchanged"
        );
    }
    Ok(())
}

// ---------------------------------------------------------------- 5

/// Epochs averaged for the end-of-training loss.
const RUNNING_WINDOW: usize = 10;

const TOY_CONFIG: &str = "height=32\nwidth=32\nwidths=8,16,32,64\nhead_width=32\nclasses=4\nsal_channels=8\n\
fuse_channels=8\nbatch_saliency=1\nbatch_action=1\nbatch_summary=1\nlr=0.003\npatience=25\nepochs=200\n";

fn toy_run(seed: u64) -> Check {
    let start = Instant::now();
    let data = SynthConfig {
        videos: 20,
        frames: 90,
        height: 32,
        width: 32,
        classes: 4,
    };
    let records = synth_generate(seed, &data).map_err(|e| e.to_string())?;
    let mut cfg = RunConfig::parse(TOY_CONFIG, Path::new("toy.cfg")).map_err(|e| e.to_string())?;
    cfg.seed = seed;
    let mut epochs: Vec<EpochStats> = Vec::new();
    let (model, _) = train(&cfg, &records, None, &mut |e| epochs.push(e.clone())).map_err(|e| e.to_string())?;
    let train_time = start.elapsed();

    let mut problems = Vec::new();
    if train_time > Duration::from_secs(15 * 60) {
        problems.push(format!("training took {:.0}s", train_time.as_secs_f64()));
    }
    let mut losses = Vec::new();
    for task in Task::ALL {
        let series: Vec<f64> = epochs.iter().map(|e| e.task_means[task.index()].unwrap()).collect();
        let first = series[0];
        let tail = &series[series.len().saturating_sub(RUNNING_WINDOW)..];
        let last = tail.iter().sum::<f64>() / tail.len() as f64;
        let reduction = (first - last) / first.abs();
        losses.push(format!("{task} {first:.3}->{last:.3}"));
        if reduction < 0.5 {
            problems.push(format!("{task} loss fell {:.0}% ({first:.3} -> {last:.3})", 100.0 * reduction));
        }
    }

    let report = evaluate(&model, &records, TaskSet::all()).map_err(|e| e.to_string())?;
    let means = report.means();
    for (metric, bar) in [("accuracy", 0.6), ("auc_j", 0.65), ("roc_auc", 0.7)] {
        let v = means[metric];
        if v < bar {
            problems.push(format!("{metric} {v:.3} < {bar}"));
        }
    }
    let mut out = std::io::stdout().lock();
    writeln!(
        out,
        "  seed {seed}: train {:.0}s; {}; accuracy {:.3}, auc_j {:.3}, roc_auc {:.3}",
        train_time.as_secs_f64(),
        losses.join(", "),
        means["accuracy"],
        means["auc_j"],
        means["roc_auc"]
    )
    .unwrap();
    if problems.is_empty() {
        Ok(())
    } else {
        Err(format!("seed {seed}: {}", problems.join("; ")))
    }
}

fn toy_training() -> Check {
    let errors: Vec<String> = (0..3).filter_map(|s| toy_run(s).err()).collect();
    if errors.is_empty() {
        Ok(())
    } else {
        Err(errors.join(" | "))
    }
}

// ---------------------------------------------------------------- 6

fn protocol_fidelity() -> Check {
    let model = small_model(3, 9);
    for n in [16, 31, 40, 50] {
        let r = synth_record(n, 3, n as u64);
        check_action_protocol(&model, &r).map_err(|e| format!("{n} frames: {e}"))?;
        check_summary_protocol(&model, &r).map_err(|e| format!("{n} frames: {e}"))?;
        check_saliency_protocol(&model, &r).map_err(|e| format!("{n} frames: {e}"))?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..1000 {
        let n = rng.random_range(1..1200);
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        let k = select_summary(&scores).map_err(|e| e.to_string())?.iter().filter(|&&b| b).count();
        ensure!(k as f64 <= SUMMARY_BUDGET * n as f64, "{k} of {n} frames selected");
    }
    Ok(())
}

// ---------------------------------------------------------------- 7

fn determinism() -> Check {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let root = tmp.path();
    let cfg = root.join("run.cfg");
    fs::write(&cfg, TINY_CONFIG).map_err(|e| e.to_string())?;
    let gen_args = ["--videos", "3", "--frames", "40", "--classes", "2", "--seed", "4"];
    let mut snaps = Vec::new();
    for k in 0..2 {
        // The config reads `data`; the second generation goes beside it.
        let data = root.join(if k == 0 { "data".to_string() } else { format!("data{k}") });
        run_bin(&[&["gen-data"][..], &gen_args, &["--out", path_str(&data)]].concat())?;
        let run_dir = root.join(format!("run{k}"));
        run_bin(&["train", "--config", path_str(&cfg), "--seed", "3", "--out", path_str(&run_dir)])?;
        let model = run_dir.join("model");
        let ev = root.join(format!("eval{k}"));
        run_bin(&["eval", "--checkpoint", path_str(&model), "--config", path_str(&cfg), "--out", path_str(&ev)])?;
        let inf = root.join(format!("infer{k}"));
        let video = root.join("data").join("video_002");
        run_bin(&["infer", "--checkpoint", path_str(&model), "--video", path_str(&video), "--out", path_str(&inf)])?;
        snaps.push([snapshot(&data), snapshot(&run_dir), snapshot(&ev), snapshot(&inf)]);
    }
    for (i, what) in ["gen-data", "train", "eval", "infer"].iter().enumerate() {
        ensure!(!snaps[0][i].is_empty(), "{what} wrote nothing");
        ensure!(snaps[0][i] == snaps[1][i], "{what} outputs differ between runs");
    }
    Ok(())
}

#[test]
fn acceptance_criteria() {
    let criteria: [(&str, fn() -> Check); 7] = [
        ("gradient suite", gradient_suite),
        ("metric oracles", metric_oracles),
        ("loss identities", loss_identities),
        ("optimizer sync-equivalence and isolation", optimizer_properties),
        ("end-to-end toy training", toy_training),
        ("protocol fidelity", protocol_fidelity),
        ("determinism", determinism),
    ];
    let mut failed = Vec::new();
    for (i, (title, f)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = f();
        report(i + 1, title, start.elapsed(), &outcome);
        if outcome.is_err() {
            failed.push(i + 1);
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
