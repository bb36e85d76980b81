//! Helpers shared by the integration tests.

#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use susinet::data::{extract_clip, sliding_inference, synth_generate, ClipShape, Crop, SynthConfig, VideoRecord};
use susinet::model::{NetworkConfig, Susinet};
use susinet::task::{Task, TaskSet};

pub type Check = std::result::Result<(), String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}
#[allow(unused_imports)]
pub(crate) use ensure;

pub fn small_model(classes: usize, seed: u64) -> Susinet {
    let net = NetworkConfig {
        frames: 16,
        height: 32,
        width: 32,
        widths: [4, 4, 8, 8],
        head_width: 8,
        classes,
        sal_channels: 4,
        fuse_channels: 4,
        ..NetworkConfig::default()
    };
    Susinet::new(net, seed).unwrap()
}

pub fn synth_record(frames: usize, classes: usize, seed: u64) -> VideoRecord {
    let cfg = SynthConfig {
        videos: 1,
        frames,
        height: 32,
        width: 32,
        classes,
    };
    synth_generate(seed, &cfg).unwrap().remove(0)
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

pub fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Action: consecutive non-overlapping 16-frame windows, each frame covered
/// once, probabilities equal to the mean of the per-window softmax.
pub fn check_action_protocol(model: &Susinet, record: &VideoRecord) -> Check {
    let n = record.len();
    let shape = ClipShape::from(model.config());
    let out = sliding_inference(record, model, Task::Action).map_err(|e| e.to_string())?;
    let starts: Vec<usize> = out.windows.iter().map(|w| w.start).collect();
    ensure!(
        starts == (0..n).step_by(16).collect::<Vec<_>>(),
        "action window starts {starts:?} for {n} frames"
    );
    let mut covered = vec![0; n];
    for w in &out.windows {
        ensure!(w.frames.len() == 16, "window at {} has {} frames", w.start, w.frames.len());
        for (k, &f) in w.frames.iter().enumerate() {
            ensure!(f == (w.start + k).min(n - 1), "window at {} slot {k} reads frame {f}", w.start);
        }
        for &f in &w.assigned {
            covered[f] += 1;
        }
    }
    ensure!(covered.iter().all(|&c| c == 1), "action windows overlap or leave gaps");

    let crop = Crop::center(record.height(), record.width(), 1.0);
    let classes = model.config().classes;
    let mut mean = vec![0.0; classes];
    for w in &out.windows {
        let clip = extract_clip(&record.frames, w.start, shape, &crop).map_err(|e| e.to_string())?;
        let v = model.evaluate(&clip, TaskSet::only(Task::Action)).map_err(|e| e.to_string())?;
        for (a, p) in mean.iter_mut().zip(softmax(v.action_logits.unwrap().data())) {
            *a += p / out.windows.len() as f64;
        }
    }
    let got = out.action_probs.ok_or("no action probabilities")?;
    for (a, b) in got.iter().zip(&mean) {
        ensure!((a - b).abs() < 1e-12, "averaged probability {a} vs recomputed {b}");
    }
    ensure!((got.iter().sum::<f64>() - 1.0).abs() < 1e-9, "probabilities do not sum to 1");
    Ok(())
}

/// Summarization: the same tiling, every frame repeating its window's score.
pub fn check_summary_protocol(model: &Susinet, record: &VideoRecord) -> Check {
    let n = record.len();
    let shape = ClipShape::from(model.config());
    let out = sliding_inference(record, model, Task::Summary).map_err(|e| e.to_string())?;
    let starts: Vec<usize> = out.windows.iter().map(|w| w.start).collect();
    ensure!(starts == (0..n).step_by(16).collect::<Vec<_>>(), "summary window starts {starts:?}");
    let scores = out.frame_scores.ok_or("no frame scores")?;
    ensure!(scores.len() == n, "{} scores for {n} frames", scores.len());
    let crop = Crop::center(record.height(), record.width(), 1.0);
    for w in &out.windows {
        let clip = extract_clip(&record.frames, w.start, shape, &crop).map_err(|e| e.to_string())?;
        let v = model.evaluate(&clip, TaskSet::only(Task::Summary)).map_err(|e| e.to_string())?;
        let s = sigmoid(v.sum_logit.unwrap());
        for &f in &w.assigned {
            ensure!(scores[f] == s, "frame {f} score {} differs from its window's {s}", scores[f]);
        }
    }
    Ok(())
}

/// Saliency: step-1 windows; frame `i` gets the map of the window starting at
/// clamp(i - 8, 0, N - 16). Records must match the network resolution so the
/// resize is the identity.
pub fn check_saliency_protocol(model: &Susinet, record: &VideoRecord) -> Check {
    let n = record.len();
    let shape = ClipShape::from(model.config());
    let out = sliding_inference(record, model, Task::Saliency).map_err(|e| e.to_string())?;
    let starts: Vec<usize> = out.windows.iter().map(|w| w.start).collect();
    ensure!(starts == (0..=n - 16).collect::<Vec<_>>(), "saliency window starts {starts:?}");
    let maps = out.saliency_maps.ok_or("no saliency maps")?;
    ensure!(maps.len() == n, "{} maps for {n} frames", maps.len());
    let crop = Crop::full(record.height(), record.width(), false);
    for i in 0..n {
        let s = i.saturating_sub(8).min(n - 16);
        let w = &out.windows[s];
        ensure!(w.assigned.contains(&i), "frame {i} not assigned to window {s}");
        if (8..n - 8).contains(&i) {
            ensure!(w.frames[8] == i, "frame {i} is not the median of its window");
        }
        let clip = extract_clip(&record.frames, s, shape, &crop).map_err(|e| e.to_string())?;
        let v = model.evaluate(&clip, TaskSet::only(Task::Saliency)).map_err(|e| e.to_string())?;
        let want: Vec<f64> = v.s_f.unwrap().data().iter().map(|&z| sigmoid(z)).collect();
        ensure!(maps[i].data() == want.as_slice(), "frame {i} map is not window {s}'s output");
    }
    Ok(())
}

pub fn bin() -> std::process::Command {
    std::process::Command::new(env!("CARGO_BIN_EXE_susinet"))
}

pub fn run_bin(args: &[&str]) -> std::result::Result<String, String> {
    let out = bin().args(args).output().map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(String::from_utf8_lossy(&out.stdout).into_owned())
    } else {
        Err(format!("{args:?} failed: {}", String::from_utf8_lossy(&out.stderr)))
    }
}

/// Every file under `dir` with its bytes, keyed by relative path.
pub fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

pub fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Two-video-class, 32x32 network small enough for a one-epoch CLI run.
pub const TINY_CONFIG: &str = "height=32\nwidth=32\nwidths=4,4,8,8\nhead_width=8\nclasses=2\nsal_channels=4\n\
fuse_channels=4\nbatch_saliency=1\nbatch_action=1\nbatch_summary=1\nepochs=1\ntrain_data=data\neval_data=data\n";
