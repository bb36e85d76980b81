//! Run configuration: `key=value` lines, `#` starts a comment. Relative data
//! paths are resolved against the directory of the config file.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::model::NetworkConfig;
use crate::optim::OptimizerConfig;
use crate::task::{Task, TaskSet};

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub network: NetworkConfig,
    pub optimizer: OptimizerConfig,
    pub loss: LossWeights,
    pub seed: u64,
    pub epochs: usize,
    /// Tasks whose samples are drawn during training and scored by eval.
    pub tasks: TaskSet,
    pub train_data: Option<PathBuf>,
    pub eval_data: Option<PathBuf>,
    /// Epochs between intermediate checkpoints; 0 keeps only the final one.
    pub checkpoint_every: usize,
    /// Clips drawn per video (and per segment for summarization) each epoch.
    pub samples_per_video: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            network: NetworkConfig::default(),
            optimizer: OptimizerConfig::default(),
            loss: LossWeights::default(),
            seed: 0,
            epochs: 1,
            tasks: TaskSet::all(),
            train_data: None,
            eval_data: None,
            checkpoint_every: 0,
            samples_per_video: 1,
        }
    }
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse '{v}'")))
}

impl RunConfig {
    /// Applies one entry; `Ok(false)` for an unknown key.
    pub fn set(&mut self, key: &str, value: &str, base: &Path) -> Result<bool> {
        if self.network.set(key, value)? {
            return Ok(true);
        }
        let o = &mut self.optimizer;
        let l = &mut self.loss;
        match key {
            "lr" => o.lr = num(key, value)?,
            "momentum" => o.momentum = num(key, value)?,
            "weight_decay" => o.weight_decay = num(key, value)?,
            "batch_saliency" => o.batch[0] = num(key, value)?,
            "batch_action" => o.batch[1] = num(key, value)?,
            "batch_summary" => o.batch[2] = num(key, value)?,
            "patience" => o.patience = num(key, value)?,
            "decay_factor" => o.decay_factor = num(key, value)?,
            "min_rel_improvement" => o.min_rel_improvement = num(key, value)?,
            "w_ce" => l.w[0] = num(key, value)?,
            "w_cc" => l.w[1] = num(key, value)?,
            "w_nss" => l.w[2] = num(key, value)?,
            "alpha_saliency" => l.alpha[0] = num(key, value)?,
            "alpha_action" => l.alpha[1] = num(key, value)?,
            "alpha_summary" => l.alpha[2] = num(key, value)?,
            "gamma" => l.gamma = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "tasks" => self.tasks = value.parse()?,
            "train_data" => self.train_data = Some(base.join(value)),
            "eval_data" => self.eval_data = Some(base.join(value)),
            "checkpoint_every" => self.checkpoint_every = num(key, value)?,
            "samples_per_video" => self.samples_per_video = num(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let base = path.parent().unwrap_or(Path::new(""));
        let mut cfg = RunConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::parse(path, Some(i + 1), "expected key=value"))?;
            let (k, v) = (k.trim(), v.trim());
            match cfg.set(k, v, base) {
                Ok(true) => {}
                Ok(false) => return Err(Error::parse(path, Some(i + 1), format!("unknown key '{k}'"))),
                Err(e) => return Err(Error::parse(path, Some(i + 1), e.to_string())),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.optimizer.validate()?;
        self.loss.validate()?;
        if self.samples_per_video == 0 {
            return Err(Error::Config("samples_per_video must be at least 1".into()));
        }
        if !self.tasks.is_subset(&self.network.heads) {
            return Err(Error::Config(format!(
                "tasks '{}' need heads that are not built (heads={})",
                self.tasks, self.network.heads
            )));
        }
        Ok(())
    }

    /// Training requires a dataset and at least one task.
    pub fn require_train(&self) -> Result<&Path> {
        if self.tasks.is_empty() {
            return Err(Error::Config("no task enabled".into()));
        }
        self.train_data
            .as_deref()
            .ok_or_else(|| Error::Config("train_data is required for training".into()))
    }

    /// Canonical `key=value` rendering; parsing it back gives the same config
    /// (paths are written as given).
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.network.to_pairs() {
            writeln!(out, "{k}={v}").expect("writing to a String");
        }
        let o = &self.optimizer;
        let l = &self.loss;
        let pairs: Vec<(&str, String)> = vec![
            ("lr", o.lr.to_string()),
            ("momentum", o.momentum.to_string()),
            ("weight_decay", o.weight_decay.to_string()),
            ("batch_saliency", o.batch[Task::Saliency.index()].to_string()),
            ("batch_action", o.batch[Task::Action.index()].to_string()),
            ("batch_summary", o.batch[Task::Summary.index()].to_string()),
            ("patience", o.patience.to_string()),
            ("decay_factor", o.decay_factor.to_string()),
            ("min_rel_improvement", o.min_rel_improvement.to_string()),
            ("w_ce", l.w[0].to_string()),
            ("w_cc", l.w[1].to_string()),
            ("w_nss", l.w[2].to_string()),
            ("alpha_saliency", l.alpha[0].to_string()),
            ("alpha_action", l.alpha[1].to_string()),
            ("alpha_summary", l.alpha[2].to_string()),
            ("gamma", l.gamma.to_string()),
            ("seed", self.seed.to_string()),
            ("epochs", self.epochs.to_string()),
            ("tasks", self.tasks.to_string()),
            ("checkpoint_every", self.checkpoint_every.to_string()),
            ("samples_per_video", self.samples_per_video.to_string()),
        ];
        for (k, v) in pairs {
            writeln!(out, "{k}={v}").expect("writing to a String");
        }
        for (k, p) in [("train_data", &self.train_data), ("eval_data", &self.eval_data)] {
            if let Some(p) = p {
                writeln!(out, "{k}={}", p.display()).expect("writing to a String");
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_training_hyperparameters() {
        let c = RunConfig::default();
        assert_eq!(c.optimizer.lr, 0.01);
        assert_eq!(c.optimizer.momentum, 0.9);
        assert_eq!(c.optimizer.weight_decay, 1e-5);
        assert_eq!(c.optimizer.batch, [128; 3]);
        assert_eq!(c.loss.w, [0.1, 2.0, 1.0]);
        assert_eq!(c.loss.alpha, [0.1, 1.0, 1.0]);
        assert_eq!(c.loss.gamma, 3.06);
    }

    #[test]
    fn parses_comments_and_paths() {
        let text = "# toy run\nlr = 0.05  # faster\nwidths=8,16,32,64\nheight=32\nwidth=32\ntasks=action,summary\ntrain_data=data\n\n";
        let c = RunConfig::parse(text, Path::new("/runs/a.cfg")).unwrap();
        assert_eq!(c.optimizer.lr, 0.05);
        assert_eq!(c.network.widths, [8, 16, 32, 64]);
        assert_eq!(c.tasks, TaskSet::from_tasks(&[Task::Action, Task::Summary]));
        assert_eq!(c.train_data.as_deref(), Some(Path::new("/runs/data")));
    }

    #[test]
    fn unknown_key_cites_line() {
        let err = RunConfig::parse("lr=0.1\nlearning_rate=0.1\n", Path::new("x.cfg")).unwrap_err();
        assert!(err.is_validation());
        match err {
            Error::Parse { line, msg, .. } => {
                assert_eq!(line, Some(2));
                assert!(msg.contains("learning_rate"));
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn bad_values_are_rejected() {
        for text in ["lr=abc", "momentum=1.5", "batch_action=0", "tasks=juggling", "gamma=-1"] {
            assert!(RunConfig::parse(text, Path::new("x.cfg")).unwrap_err().is_validation(), "{text}");
        }
    }

    #[test]
    fn text_round_trip() {
        let mut c = RunConfig::default();
        c.seed = 9;
        c.tasks = TaskSet::only(Task::Saliency);
        c.train_data = Some(PathBuf::from("/d/train"));
        c.optimizer.lr = 0.003;
        let back = RunConfig::parse(&c.to_text(), Path::new("/elsewhere/c.cfg")).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn training_needs_data_and_tasks() {
        let mut c = RunConfig::default();
        assert!(c.require_train().is_err());
        c.train_data = Some(PathBuf::from("d"));
        assert!(c.require_train().is_ok());
        c.tasks = TaskSet::none();
        assert!(c.require_train().is_err());
    }
}
