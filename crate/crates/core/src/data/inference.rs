use super::sampling::{extract_clip, source_frame, Crop};
use super::{ClipShape, VideoRecord};
use crate::autodiff::kernels::bilinear;
use crate::error::{Error, Result};
use crate::model::Susinet;
use crate::task::{Task, TaskSet};
use crate::tensor::Tensor;

/// One evaluated window: where it starts, which source frames fill its slots
/// and which video frames receive its output.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Window {
    pub start: usize,
    pub frames: Vec<usize>,
    pub assigned: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InferenceOutput {
    pub task: Task,
    pub windows: Vec<Window>,
    /// Video-level class probabilities (action).
    pub action_probs: Option<Vec<f64>>,
    /// Per-frame importance scores (summary).
    pub frame_scores: Option<Vec<f64>>,
    /// Per-frame `[H, W]` saliency maps at the video's resolution.
    pub saliency_maps: Option<Vec<Tensor>>,
}

/// Non-overlapping windows covering every frame once; the last one may be
/// padded by repeating the final frame.
fn tiling_windows(n: usize, t: usize) -> Vec<Window> {
    (0..n)
        .step_by(t)
        .map(|start| Window {
            start,
            frames: (0..t).map(|k| source_frame(start, k, n)).collect(),
            assigned: (start..(start + t).min(n)).collect(),
        })
        .collect()
}

/// Step-1 windows; frame `i` takes the window whose median slot is `i`,
/// clamped to the nearest valid window at the video boundaries.
fn median_windows(n: usize, t: usize) -> Vec<Window> {
    let last = n.saturating_sub(t);
    let mut windows: Vec<Window> = (0..=last)
        .map(|start| Window {
            start,
            frames: (0..t).map(|k| source_frame(start, k, n)).collect(),
            assigned: Vec::new(),
        })
        .collect();
    for i in 0..n {
        let s = i.saturating_sub(t / 2).min(last);
        windows[s].assigned.push(i);
    }
    windows
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Test-time protocol for one video and task.
pub fn sliding_inference(record: &VideoRecord, model: &Susinet, task: Task) -> Result<InferenceOutput> {
    record.validate()?;
    let shape = ClipShape::from(model.config());
    let (n, h, w) = (record.len(), record.height(), record.width());
    let tasks = TaskSet::only(task);
    let mut out = InferenceOutput {
        task,
        windows: Vec::new(),
        action_probs: None,
        frame_scores: None,
        saliency_maps: None,
    };
    match task {
        Task::Action | Task::Summary => {
            let crop = Crop::center(h, w, 1.0);
            out.windows = tiling_windows(n, shape.frames);
            let mut probs = vec![0.0; model.config().classes];
            let mut scores = vec![0.0; n];
            for win in &out.windows {
                let clip = extract_clip(&record.frames, win.start, shape, &crop)?;
                let v = model.evaluate(&clip, tasks)?;
                if task == Task::Action {
                    let logits = v.action_logits.ok_or_else(|| Error::Contract("missing action logits".into()))?;
                    for (p, q) in probs.iter_mut().zip(softmax(logits.data())) {
                        *p += q;
                    }
                } else {
                    let s = sigmoid(v.sum_logit.ok_or_else(|| Error::Contract("missing summary logit".into()))?);
                    for &i in &win.assigned {
                        scores[i] = s;
                    }
                }
            }
            if task == Task::Action {
                let k = out.windows.len() as f64;
                out.action_probs = Some(probs.iter().map(|p| p / k).collect());
            } else {
                out.frame_scores = Some(scores);
            }
        }
        Task::Saliency => {
            let crop = Crop::full(h, w, false);
            out.windows = median_windows(n, shape.frames);
            let mut maps = vec![None; n];
            for win in &out.windows {
                if win.assigned.is_empty() {
                    continue;
                }
                let clip = extract_clip(&record.frames, win.start, shape, &crop)?;
                let v = model.evaluate(&clip, tasks)?;
                let logits = v.s_f.ok_or_else(|| Error::Contract("missing saliency map".into()))?;
                let prob: Vec<f64> = logits.data().iter().map(|&z| sigmoid(z)).collect();
                let resized = Tensor::new(vec![h, w], bilinear(&prob, 1, (shape.height, shape.width), (h, w)))?;
                for &i in &win.assigned {
                    maps[i] = Some(resized.clone());
                }
            }
            out.saliency_maps = Some(maps.into_iter().map(|m| m.expect("every frame is assigned")).collect());
        }
    }
    Ok(out)
}
