//! Asynchronous multi-task SGD. Each task head is updated from its own
//! gradient accumulator once that task has seen its effective batch; the
//! shared pathway is updated from the sum of all tasks' gradients once the
//! combined window of samples has been seen.

use std::fs;
use std::path::Path;

use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::model::{ModelParams, Partition, Susinet};
use crate::sample::{sample_loss, AnnotatedClip};
use crate::task::Task;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Effective batch sizes for saliency, action and summarization.
    pub batch: [usize; 3],
    pub patience: usize,
    pub decay_factor: f64,
    /// Minimum relative loss improvement that resets the plateau counter.
    pub min_rel_improvement: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 1e-5,
            batch: [128; 3],
            patience: 3,
            decay_factor: 10.0,
            min_rel_improvement: 1e-3,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        if self.batch.contains(&0) {
            return Err(Error::Config("batch sizes must be at least 1".into()));
        }
        if self.patience == 0 || self.decay_factor <= 1.0 {
            return Err(Error::Config("patience must be >= 1 and decay_factor > 1".into()));
        }
        Ok(())
    }

    pub fn shared_window(&self) -> usize {
        self.batch.iter().sum()
    }
}

/// `g = grad_sum/B + wd·param; buf = momentum·buf + g; param -= lr·buf`.
pub fn sgd_update(
    param: &mut Tensor,
    grad_sum: &Tensor,
    buf: &mut Tensor,
    batch: usize,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    param.check_same_shape(grad_sum, "sgd_update gradient")?;
    param.check_same_shape(buf, "sgd_update momentum buffer")?;
    let inv_b = 1.0 / batch as f64;
    for ((p, &gs), b) in param.data_mut().iter_mut().zip(grad_sum.data()).zip(buf.data_mut()) {
        let g = gs * inv_b + weight_decay * *p;
        *b = momentum * *b + g;
        *p -= lr * *b;
    }
    Ok(())
}

/// Divides `lr` by `factor` when none of the last `patience` losses improved
/// on the best earlier loss by at least `min_rel` (relative).
pub fn lr_on_plateau(history: &[f64], lr: f64, patience: usize, min_rel: f64, factor: f64) -> f64 {
    if history.len() < patience + 1 {
        return lr;
    }
    let split = history.len() - patience;
    let best = history[..split].iter().copied().fold(f64::INFINITY, f64::min);
    let bar = best - min_rel * best.abs();
    if history[split..].iter().any(|&l| l < bar) {
        lr
    } else {
        lr / factor
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct UpdateEvent {
    pub partition: Partition,
    /// 1-based update count of this partition.
    pub step: u64,
}

fn slot(p: Partition) -> usize {
    match p {
        Partition::Shared => 0,
        Partition::Saliency => 1,
        Partition::Action => 2,
        Partition::Summary => 3,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer {
    config: OptimizerConfig,
    lr: f64,
    momentum: Vec<Tensor>,
    acc: Vec<Tensor>,
    partitions: Vec<Partition>,
    counts: [usize; 3],
    shared_count: usize,
    steps: [u64; 4],
    /// Epoch losses since the last learning-rate decay.
    history: Vec<f64>,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig, params: &ModelParams) -> Result<Self> {
        config.validate()?;
        let zeros: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        Ok(Optimizer {
            lr: config.lr,
            config,
            momentum: zeros.clone(),
            acc: zeros,
            partitions: params.iter().map(|p| p.partition).collect(),
            counts: [0; 3],
            shared_count: 0,
            steps: [0; 4],
            history: Vec::new(),
        })
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn counts(&self) -> [usize; 3] {
        self.counts
    }

    pub fn shared_count(&self) -> usize {
        self.shared_count
    }

    pub fn steps(&self, p: Partition) -> u64 {
        self.steps[slot(p)]
    }

    /// Current gradient sum for parameter `idx`.
    pub fn accumulator(&self, idx: usize) -> &Tensor {
        &self.acc[idx]
    }

    pub fn momentum_buffer(&self, idx: usize) -> &Tensor {
        &self.momentum[idx]
    }

    /// Adds per-parameter gradients of one `task` sample. Only shared and
    /// `task` parameters are touched.
    pub fn accumulate_grads(&mut self, task: Task, grads: &[(usize, Tensor)]) -> Result<()> {
        let t = task.index();
        if self.counts[t] >= self.config.batch[t] || self.shared_count >= self.config.shared_window() {
            return Err(Error::Contract(format!(
                "{task} batch is full; call maybe_step before accumulating more samples"
            )));
        }
        let own = Partition::of_task(task);
        for (idx, grad) in grads {
            let part = self.partitions[*idx];
            if part == Partition::Shared || part == own {
                self.acc[*idx].add_assign(grad)?;
            }
        }
        self.counts[t] += 1;
        self.shared_count += 1;
        Ok(())
    }

    /// Forward and backward of `α_task·L_task` for one sample, accumulated.
    /// Returns the weighted loss.
    pub fn accumulate(&mut self, model: &Susinet, sample: &AnnotatedClip, weights: &LossWeights) -> Result<f64> {
        let mut g = Graph::new();
        let (loss, binding) = sample_loss(&mut g, model, sample, weights)?;
        g.backward(loss)?;
        let grads = binding.grads(&g);
        self.accumulate_grads(sample.task(), &grads)?;
        Ok(g.value(loss).item())
    }

    /// Applies every update whose batch is complete.
    pub fn maybe_step(&mut self, params: &mut ModelParams) -> Result<Vec<UpdateEvent>> {
        let mut events = Vec::new();
        for task in Task::ALL {
            let t = task.index();
            if self.counts[t] >= self.config.batch[t] {
                self.apply(params, Partition::of_task(task), self.config.batch[t])?;
                self.counts[t] = 0;
                events.push(self.event(Partition::of_task(task)));
            }
        }
        let window = self.config.shared_window();
        if self.shared_count >= window {
            self.apply(params, Partition::Shared, window)?;
            self.shared_count = 0;
            events.push(self.event(Partition::Shared));
        }
        Ok(events)
    }

    fn event(&mut self, p: Partition) -> UpdateEvent {
        self.steps[slot(p)] += 1;
        UpdateEvent {
            partition: p,
            step: self.steps[slot(p)],
        }
    }

    fn apply(&mut self, params: &mut ModelParams, part: Partition, batch: usize) -> Result<()> {
        let c = &self.config;
        for idx in 0..self.partitions.len() {
            if self.partitions[idx] != part {
                continue;
            }
            sgd_update(
                params.value_mut(idx),
                &self.acc[idx],
                &mut self.momentum[idx],
                batch,
                self.lr,
                c.momentum,
                c.weight_decay,
            )?;
            self.acc[idx].data_mut().fill(0.0);
        }
        Ok(())
    }

    /// Records an epoch loss and decays the learning rate on a plateau.
    /// Returns the (possibly new) learning rate.
    pub fn end_epoch(&mut self, loss: f64) -> f64 {
        self.history.push(loss);
        let c = &self.config;
        let lr = lr_on_plateau(&self.history, self.lr, c.patience, c.min_rel_improvement, c.decay_factor);
        if lr != self.lr {
            self.lr = lr;
            self.history = vec![loss];
        }
        self.lr
    }

    /// Saves buffers, accumulators and counters in the checkpoint format.
    pub fn save(&self, dir: &Path, params: &ModelParams) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut manifest = String::new();
        for (idx, p) in params.iter().enumerate() {
            for (kind, t) in [("momentum", &self.momentum[idx]), ("acc", &self.acc[idx])] {
                let name = format!("{kind}.{}", p.name);
                let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
                manifest.push_str(&format!("{name}={} {}\n", dims.join("x"), p.partition.tag()));
                t.save(&dir.join(format!("{name}.stsr")))?;
            }
        }
        let path = dir.join("manifest");
        fs::write(&path, manifest).map_err(|e| Error::io(&path, e))?;
        let history: Vec<String> = self.history.iter().map(|v| format!("{v:e}")).collect();
        let state = format!(
            "lr={:e}\ncounts={},{},{}\nshared_count={}\nsteps={},{},{},{}\nhistory={}\n",
            self.lr,
            self.counts[0],
            self.counts[1],
            self.counts[2],
            self.shared_count,
            self.steps[0],
            self.steps[1],
            self.steps[2],
            self.steps[3],
            history.join(",")
        );
        let path = dir.join("state");
        fs::write(&path, state).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path, config: OptimizerConfig, params: &ModelParams) -> Result<Self> {
        let mut opt = Optimizer::new(config, params)?;
        for (idx, p) in params.iter().enumerate() {
            opt.momentum[idx] = load_matching(dir, &format!("momentum.{}", p.name), &p.value)?;
            opt.acc[idx] = load_matching(dir, &format!("acc.{}", p.name), &p.value)?;
        }
        let path = dir.join("state");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        for (i, line) in text.lines().enumerate() {
            let bad = |msg: String| Error::parse(&path, Some(i + 1), msg);
            let Some((k, v)) = line.split_once('=') else {
                return Err(bad("expected key=value".into()));
            };
            let floats = |v: &str| -> Result<Vec<f64>> {
                v.split(',')
                    .filter(|s| !s.is_empty())
                    .map(|s| s.parse().map_err(|_| bad(format!("bad number '{s}'"))))
                    .collect()
            };
            let ints = |v: &str| -> Result<Vec<u64>> {
                v.split(',')
                    .map(|s| s.parse().map_err(|_| bad(format!("bad integer '{s}'"))))
                    .collect()
            };
            match k {
                "lr" => opt.lr = floats(v)?.first().copied().ok_or_else(|| bad("missing lr".into()))?,
                "counts" => {
                    let c = ints(v)?;
                    if c.len() != 3 {
                        return Err(bad("counts needs three values".into()));
                    }
                    opt.counts = [c[0] as usize, c[1] as usize, c[2] as usize];
                }
                "shared_count" => opt.shared_count = ints(v)?[0] as usize,
                "steps" => {
                    opt.steps = ints(v)?.try_into().map_err(|_| bad("steps needs four values".into()))?;
                }
                "history" => opt.history = floats(v)?,
                _ => return Err(bad(format!("unknown key '{k}'"))),
            }
        }
        Ok(opt)
    }
}

fn load_matching(dir: &Path, name: &str, like: &Tensor) -> Result<Tensor> {
    let path = dir.join(format!("{name}.stsr"));
    let t = Tensor::load(&path)?;
    if t.shape() != like.shape() {
        return Err(Error::parse(&path, None, format!("shape {:?} does not match parameter {:?}", t.shape(), like.shape())));
    }
    Ok(t)
}
