use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use susinet::checkpoint::load_model;
use susinet::config::RunConfig;
use susinet::data::{read_dataset, read_record, sliding_inference, synth_generate, write_dataset, SynthConfig};
use susinet::eval::{evaluate, write_report};
use susinet::gradcheck::{format_table, run_all, DEFAULT_INSTANCES};
use susinet::metrics::select_summary;
use susinet::task::{Task, TaskSet};
use susinet::train::train;
use susinet::{Error, Result};

#[derive(Parser)]
#[command(name = "susinet", version, about = "Multi-task video saliency, action recognition and summarization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset.
    GenData {
        #[arg(long, default_value_t = 20)]
        videos: usize,
        #[arg(long, default_value_t = 200)]
        frames: usize,
        #[arg(long, default_value_t = 4)]
        classes: usize,
        #[arg(long, default_value_t = 32)]
        height: usize,
        #[arg(long, default_value_t = 32)]
        width: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a network from a run config.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        task: Option<TaskSet>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset directory; defaults to eval_data from --config.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        task: Option<TaskSet>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the test-time protocol on one video.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Record directory.
        #[arg(long)]
        video: PathBuf,
        #[arg(long, default_value = "all")]
        task: TaskSet,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of every op, loss and head.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = DEFAULT_INSTANCES)]
        instances: usize,
    },
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::Io {
            path: parent.to_path_buf(),
            source: e,
        })?;
    }
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn gen_data(cfg: SynthConfig, seed: u64, out: &Path) -> Result<()> {
    let records = synth_generate(seed, &cfg)?;
    write_dataset(out, &records)?;
    println!("wrote {} records to {}", records.len(), out.display());
    Ok(())
}

fn cmd_train(config: &Path, seed: Option<u64>, task: Option<TaskSet>, out: &Path) -> Result<()> {
    let mut cfg = RunConfig::load(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(t) = task {
        cfg.tasks = t;
    }
    cfg.validate()?;
    let records = read_dataset(cfg.require_train()?)?;
    let (_, log) = train(&cfg, &records, Some(out), &mut |e| {
        let parts: Vec<String> = Task::ALL
            .iter()
            .filter_map(|t| e.task_means[t.index()].map(|v| format!("{t}={v:.4}")))
            .collect();
        eprintln!("epoch {} lr={} {} mean={:.4}", e.epoch, e.lr, parts.join(" "), e.mean);
    })?;
    println!("trained {} steps; checkpoint in {}", log.steps.len(), out.join("model").display());
    Ok(())
}

fn cmd_eval(
    checkpoint: &Path,
    data: Option<PathBuf>,
    config: Option<PathBuf>,
    task: Option<TaskSet>,
    out: &Path,
) -> Result<()> {
    let cfg = config.as_deref().map(RunConfig::load).transpose()?;
    let data = data
        .or_else(|| cfg.as_ref().and_then(|c| c.eval_data.clone()))
        .ok_or_else(|| Error::Config("eval needs --data or eval_data in --config".into()))?;
    let model = load_model(checkpoint)?;
    let tasks = task
        .or_else(|| cfg.as_ref().map(|c| c.tasks))
        .unwrap_or(model.config().heads);
    let records = read_dataset(&data)?;
    let report = evaluate(&model, &records, tasks)?;
    write_report(out, &report)?;
    for (metric, mean) in report.means() {
        println!("{metric}\t{mean:.6}");
    }
    Ok(())
}

fn cmd_infer(checkpoint: &Path, video: &Path, tasks: TaskSet, out: &Path) -> Result<()> {
    let model = load_model(checkpoint)?;
    let record = read_record(video)?;
    if !tasks.is_subset(&model.config().heads) {
        return Err(Error::Config(format!(
            "checkpoint has heads '{}' but inference asks for '{tasks}'",
            model.config().heads
        )));
    }
    for task in tasks.iter() {
        let res = sliding_inference(&record, &model, task)?;
        let mut windows = String::from("start\tframes\tassigned\n");
        for w in &res.windows {
            let join = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
            writeln!(windows, "{}\t{}\t{}", w.start, join(&w.frames), join(&w.assigned)).expect("string");
        }
        write(&out.join(task.name()).join("windows.tsv"), &windows)?;
        match task {
            Task::Saliency => {
                let dir = out.join(task.name());
                for (t, m) in res.saliency_maps.iter().flatten().enumerate() {
                    m.save(&dir.join(format!("frame_{t:05}.stsr")))?;
                }
                println!("saliency: {} maps in {}", record.len(), dir.display());
            }
            Task::Action => {
                let probs = res.action_probs.unwrap_or_default();
                let mut best = 0;
                for (i, &p) in probs.iter().enumerate() {
                    if p > probs[best] {
                        best = i;
                    }
                }
                let mut text = format!("class={best}\n");
                for (i, p) in probs.iter().enumerate() {
                    writeln!(text, "{i}\t{p:.12}").expect("string");
                }
                write(&out.join(task.name()).join("prediction.txt"), &text)?;
                println!("action: class {best} (p={:.4})", probs[best]);
            }
            Task::Summary => {
                let scores = res.frame_scores.unwrap_or_default();
                let selected = select_summary(&scores)?;
                let mut text = String::from("frame\tscore\tselected\n");
                for (i, (s, sel)) in scores.iter().zip(&selected).enumerate() {
                    writeln!(text, "{i}\t{s:.12}\t{}", u8::from(*sel)).expect("string");
                }
                write(&out.join(task.name()).join("scores.tsv"), &text)?;
                let n = selected.iter().filter(|&&b| b).count();
                println!("summary: {n} of {} frames selected", scores.len());
            }
        }
    }
    Ok(())
}

fn cmd_gradcheck(seed: u64, instances: usize) -> Result<bool> {
    let (rows, elapsed) = run_all(instances, seed);
    print!("{}", format_table(&rows, elapsed));
    Ok(rows.iter().all(|r| r.passed()))
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::GenData {
            videos,
            frames,
            classes,
            height,
            width,
            seed,
            out,
        } => {
            let cfg = SynthConfig {
                videos,
                frames,
                height,
                width,
                classes,
            };
            gen_data(cfg, seed, &out)?;
        }
        Command::Train { config, seed, task, out } => cmd_train(&config, seed, task, &out)?,
        Command::Eval {
            checkpoint,
            data,
            config,
            task,
            out,
        } => cmd_eval(&checkpoint, data, config, task, &out)?,
        Command::Infer {
            checkpoint,
            video,
            task,
            out,
        } => cmd_infer(&checkpoint, &video, task, &out)?,
        Command::Gradcheck { seed, instances } => return cmd_gradcheck(seed, instances),
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
