//! Training loop: per-task sample streams interleaved round-robin
//! (saliency, action, summary, repeat), asynchronous updates, plateau decay.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::save_model;
use crate::config::RunConfig;
use crate::data::{sample_action_clip, sample_saliency_clip, sample_summary_clip, ClipShape, VideoRecord};
use crate::error::{Error, Result};
use crate::metrics::{uniform_segments, SEGMENT_LEN};
use crate::model::Susinet;
use crate::optim::Optimizer;
use crate::sample::AnnotatedClip;
use crate::task::Task;

#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    /// Learning rate used during the epoch.
    pub lr: f64,
    /// Mean weighted loss per task; `None` for tasks not trained.
    pub task_means: [Option<f64>; 3],
    /// Mean weighted loss over all samples, the plateau signal.
    pub mean: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    /// `(step, task, weighted loss)` for every sample.
    pub steps: Vec<(usize, Task, f64)>,
    pub epochs: Vec<EpochStats>,
}

/// One scheduled sample: record index and, for summarization, the segment.
#[derive(Debug, Clone, Copy)]
struct Draw {
    record: usize,
    segment: usize,
}

fn task_streams(cfg: &RunConfig, records: &[VideoRecord]) -> Result<[Vec<Draw>; 3]> {
    let mut streams: [Vec<Draw>; 3] = Default::default();
    for task in cfg.tasks.iter() {
        let stream = &mut streams[task.index()];
        for (i, r) in records.iter().enumerate() {
            let annotated = match task {
                Task::Saliency => r.fixations.is_some(),
                Task::Action => r.class.is_some(),
                Task::Summary => r.importance.is_some(),
            };
            if !annotated {
                continue;
            }
            let segments = if task == Task::Summary {
                uniform_segments(r.len(), SEGMENT_LEN).len()
            } else {
                1
            };
            for segment in 0..segments {
                for _ in 0..cfg.samples_per_video {
                    stream.push(Draw { record: i, segment });
                }
            }
        }
        if stream.is_empty() {
            return Err(Error::Data(format!("no training video carries {task} annotations")));
        }
    }
    Ok(streams)
}

fn draw(task: Task, d: Draw, records: &[VideoRecord], shape: ClipShape, rng: &mut ChaCha8Rng) -> Result<AnnotatedClip> {
    let r = &records[d.record];
    match task {
        Task::Saliency => sample_saliency_clip(r, shape, rng),
        Task::Action => sample_action_clip(r, shape, rng),
        Task::Summary => sample_summary_clip(r, d.segment, shape, rng),
    }
}

fn check_classes(cfg: &RunConfig, records: &[VideoRecord]) -> Result<()> {
    if !cfg.tasks.contains(Task::Action) {
        return Ok(());
    }
    for r in records {
        if let Some(c) = r.class.filter(|&c| c >= cfg.network.classes) {
            return Err(Error::Data(format!(
                "{}: class {c} but the network has {} classes",
                r.id, cfg.network.classes
            )));
        }
    }
    Ok(())
}

/// Output files written under the run directory.
pub const LOSS_CSV: &str = "loss.csv";
pub const EPOCH_CSV: &str = "epochs.csv";
pub const MODEL_DIR: &str = "model";
pub const OPTIMIZER_DIR: &str = "optimizer";
pub const RUN_CONFIG: &str = "run.cfg";

struct Outputs {
    dir: std::path::PathBuf,
    loss: BufWriter<File>,
    epochs: BufWriter<File>,
}

impl Outputs {
    fn create(dir: &Path, cfg: &RunConfig) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let p = dir.join(RUN_CONFIG);
        fs::write(&p, cfg.to_text()).map_err(|e| Error::io(&p, e))?;
        let open = |name: &str, header: &str| -> Result<BufWriter<File>> {
            let p = dir.join(name);
            let mut f = BufWriter::new(File::create(&p).map_err(|e| Error::io(&p, e))?);
            f.write_all(header.as_bytes()).map_err(|e| Error::io(&p, e))?;
            Ok(f)
        };
        Ok(Outputs {
            dir: dir.to_path_buf(),
            loss: open(LOSS_CSV, "step,task,loss\n")?,
            epochs: open(EPOCH_CSV, "epoch,lr,saliency,action,summary,mean\n")?,
        })
    }

    fn io_err(&self, name: &str, e: std::io::Error) -> Error {
        Error::io(self.dir.join(name), e)
    }
}

fn opt_field(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| x.to_string())
}

/// Trains a freshly initialized network on `records`. With `out`, writes the
/// loss log, epoch table, periodic and final checkpoints and the optimizer
/// state. `on_epoch` sees every finished epoch.
pub fn train(
    cfg: &RunConfig,
    records: &[VideoRecord],
    out: Option<&Path>,
    on_epoch: &mut dyn FnMut(&EpochStats),
) -> Result<(Susinet, TrainLog)> {
    cfg.validate()?;
    if cfg.tasks.is_empty() {
        return Err(Error::Config("no task enabled".into()));
    }
    for r in records {
        r.validate()?;
    }
    check_classes(cfg, records)?;
    let mut streams = task_streams(cfg, records)?;
    let mut model = Susinet::new(cfg.network.clone(), cfg.seed)?;
    let mut opt = Optimizer::new(cfg.optimizer.clone(), model.params())?;
    let shape = ClipShape::from(model.config());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut outputs = out.map(|d| Outputs::create(d, cfg)).transpose()?;
    let mut log = TrainLog::default();
    let mut step = 0usize;

    for epoch in 1..=cfg.epochs {
        let lr = opt.lr();
        for s in streams.iter_mut() {
            s.shuffle(&mut rng);
        }
        let longest = streams.iter().map(Vec::len).max().unwrap_or(0);
        let mut sums = [0.0; 3];
        let mut counts = [0usize; 3];
        for i in 0..longest {
            for task in Task::ALL {
                let Some(&d) = streams[task.index()].get(i) else {
                    continue;
                };
                let context = |e: Error| {
                    if e.is_validation() {
                        e
                    } else {
                        Error::Numeric(format!("training step {step} ({task}, epoch {epoch}): {e}"))
                    }
                };
                let sample = draw(task, d, records, shape, &mut rng)?;
                let loss = opt.accumulate(&model, &sample, &cfg.loss).map_err(context)?;
                if !loss.is_finite() {
                    return Err(Error::Numeric(format!(
                        "training step {step} ({task}, epoch {epoch}): loss is {loss}"
                    )));
                }
                opt.maybe_step(model.params_mut()).map_err(context)?;
                if let Some(o) = outputs.as_mut() {
                    writeln!(o.loss, "{step},{task},{loss}").map_err(|e| o.io_err(LOSS_CSV, e))?;
                }
                log.steps.push((step, task, loss));
                sums[task.index()] += loss;
                counts[task.index()] += 1;
                step += 1;
            }
        }
        let total: usize = counts.iter().sum();
        let mean = sums.iter().sum::<f64>() / total.max(1) as f64;
        let mut task_means = [None; 3];
        for t in 0..3 {
            if counts[t] > 0 {
                task_means[t] = Some(sums[t] / counts[t] as f64);
            }
        }
        let stats = EpochStats {
            epoch,
            lr,
            task_means,
            mean,
        };
        opt.end_epoch(mean);
        if let Some(o) = outputs.as_mut() {
            let [a, b, c] = task_means.map(opt_field);
            writeln!(o.epochs, "{epoch},{lr},{a},{b},{c},{mean}").map_err(|e| o.io_err(EPOCH_CSV, e))?;
            o.loss.flush().map_err(|e| o.io_err(LOSS_CSV, e))?;
            o.epochs.flush().map_err(|e| o.io_err(EPOCH_CSV, e))?;
            if cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0 && epoch < cfg.epochs {
                save_model(&model, &o.dir.join(format!("epoch_{epoch:04}")))?;
            }
        }
        on_epoch(&stats);
        log.epochs.push(stats);
    }

    if let Some(o) = outputs.as_mut() {
        o.loss.flush().map_err(|e| o.io_err(LOSS_CSV, e))?;
        o.epochs.flush().map_err(|e| o.io_err(EPOCH_CSV, e))?;
        save_model(&model, &o.dir.join(MODEL_DIR))?;
        opt.save(&o.dir.join(OPTIMIZER_DIR), model.params())?;
    }
    Ok((model, log))
}
