//! Evaluation metrics: saliency (CC, NSS, AUC-Judd, shuffled AUC),
//! keyshot-based summary F-score and frame-wise ROC-AUC.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::losses::{cc_value, nss_value};
use crate::tensor::Tensor;

/// Fraction of the video kept in a generated summary.
pub const SUMMARY_BUDGET: f64 = 0.15;
/// Length of the uniform segments used as shots.
pub const SEGMENT_LEN: usize = 90;

/// Per-frame fixation coordinates `(x, y)` in pixels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FixationSet {
    pub width: usize,
    pub height: usize,
    pub frames: Vec<Vec<(usize, usize)>>,
}

impl FixationSet {
    pub fn new(width: usize, height: usize, frames: Vec<Vec<(usize, usize)>>) -> Result<Self> {
        for (t, pts) in frames.iter().enumerate() {
            if let Some(&(x, y)) = pts.iter().find(|&&(x, y)| x >= width || y >= height) {
                return Err(Error::Data(format!(
                    "fixation ({x}, {y}) in frame {t} outside {width}x{height}"
                )));
            }
        }
        Ok(FixationSet { width, height, frames })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Binary `[H, W]` map of frame `t`.
    pub fn rasterize(&self, t: usize) -> Tensor {
        rasterize(&self.frames[t], self.height, self.width)
    }

    /// Union of fixated pixels over every frame except `t`, minus the pixels
    /// fixated in `t`; sorted and deduplicated.
    pub fn shuffled_negatives(&self, t: usize) -> Vec<(usize, usize)> {
        let own = dedup(self.frames[t].clone());
        let mut pool: Vec<(usize, usize)> = self
            .frames
            .iter()
            .enumerate()
            .filter(|&(s, _)| s != t)
            .flat_map(|(_, pts)| pts.iter().copied())
            .collect();
        pool = dedup(pool);
        pool.retain(|p| own.binary_search(p).is_err());
        pool
    }
}

fn dedup(mut pts: Vec<(usize, usize)>) -> Vec<(usize, usize)> {
    pts.sort_unstable();
    pts.dedup();
    pts
}

pub fn rasterize(points: &[(usize, usize)], height: usize, width: usize) -> Tensor {
    let mut m = Tensor::zeros(&[height, width]);
    for &(x, y) in points {
        m.data_mut()[y * width + x] = 1.0;
    }
    m
}

/// Pearson correlation between a predicted and a dense map.
pub fn metric_cc(p: &Tensor, y_den: &Tensor) -> Result<f64> {
    Ok(-cc_value(p, y_den)?)
}

/// Mean standardized prediction at fixated pixels.
pub fn metric_nss(p: &Tensor, y_fix: &Tensor) -> Result<f64> {
    Ok(-nss_value(p, y_fix)?)
}

/// Area under the ROC curve separating `pos` from `neg`, swept over every
/// distinct threshold with trapezoids (ties count one half).
pub fn roc_auc(pos: &[f64], neg: &[f64]) -> Result<f64> {
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::DegenerateTarget(format!(
            "AUC needs both classes, got {} positives and {} negatives",
            pos.len(),
            neg.len()
        )));
    }
    let mut all: Vec<(f64, bool)> = pos.iter().map(|&v| (v, true)).chain(neg.iter().map(|&v| (v, false))).collect();
    if all.iter().any(|(v, _)| v.is_nan()) {
        return Err(Error::Numeric("AUC scores contain NaN".into()));
    }
    all.sort_by(|a, b| b.0.total_cmp(&a.0));
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut area = 0.0;
    let mut i = 0;
    while i < all.len() {
        let (tp0, fp0) = (tp, fp);
        let v = all[i].0;
        while i < all.len() && all[i].0 == v {
            if all[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        area += (fp - fp0) as f64 * (tp + tp0) as f64 * 0.5;
    }
    Ok(area / (pos.len() as f64 * neg.len() as f64))
}

/// AUC with fixated pixels as positives and all other pixels as negatives.
pub fn auc_judd(p: &Tensor, y_fix: &Tensor) -> Result<f64> {
    p.check_same_shape(y_fix, "auc_judd")?;
    let (mut pos, mut neg) = (Vec::new(), Vec::new());
    for (&v, &f) in p.data().iter().zip(y_fix.data()) {
        if f > 0.0 {
            pos.push(v);
        } else {
            neg.push(v);
        }
    }
    roc_auc(&pos, &neg)
}

/// AUC with this frame's fixated pixels as positives and `negatives` (pixels
/// fixated in other frames) as negatives.
pub fn shuffled_auc(p: &Tensor, fixations: &[(usize, usize)], negatives: &[(usize, usize)]) -> Result<f64> {
    if p.rank() != 2 {
        return Err(Error::dim("shuffled_auc expects an [H, W] map"));
    }
    let (h, w) = (p.shape()[0], p.shape()[1]);
    let own = dedup(fixations.to_vec());
    let at = |pts: &[(usize, usize)]| -> Result<Vec<f64>> {
        pts.iter()
            .map(|&(x, y)| {
                if x < w && y < h {
                    Ok(p.data()[y * w + x])
                } else {
                    Err(Error::Data(format!("fixation ({x}, {y}) outside {w}x{h}")))
                }
            })
            .collect()
    };
    let neg: Vec<(usize, usize)> = dedup(negatives.to_vec())
        .into_iter()
        .filter(|q| own.binary_search(q).is_err())
        .collect();
    if neg.is_empty() {
        return Err(Error::DegenerateTarget("shuffled AUC negative pool is empty".into()));
    }
    roc_auc(&at(&own)?, &at(&neg)?)
}

/// Truncated Gaussian blur (square window of radius ⌈3σ⌉) of a fixation map,
/// normalized to peak 1. An empty map stays all zero.
pub fn gaussian_density(y_fix: &Tensor, sigma: f64) -> Result<Tensor> {
    if y_fix.rank() != 2 {
        return Err(Error::dim("gaussian_density expects an [H, W] map"));
    }
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::Config(format!("sigma must be positive, got {sigma}")));
    }
    let (h, w) = (y_fix.shape()[0], y_fix.shape()[1]);
    let r = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-r..=r).map(|d| (-((d * d) as f64) / (2.0 * sigma * sigma)).exp()).collect();
    let blur = |src: &[f64], len: usize, stride: usize, count: usize, step: usize| -> Vec<f64> {
        let mut out = vec![0.0; src.len()];
        for line in 0..count {
            for i in 0..len as isize {
                let mut acc = 0.0;
                for (k, kv) in kernel.iter().enumerate() {
                    let j = i + k as isize - r;
                    if (0..len as isize).contains(&j) {
                        acc += kv * src[line * step + j as usize * stride];
                    }
                }
                out[line * step + i as usize * stride] = acc;
            }
        }
        out
    };
    let rows = blur(y_fix.data(), w, 1, h, w);
    let both = blur(&rows, h, w, w, 1);
    let peak = both.iter().copied().fold(0.0f64, f64::max);
    let data = if peak > 0.0 { both.iter().map(|v| v / peak).collect() } else { both };
    Tensor::new(vec![h, w], data)
}

/// Non-overlapping `[start, end)` segments of `seg_len` frames; the last one
/// may be shorter.
pub fn uniform_segments(n_frames: usize, seg_len: usize) -> Vec<(usize, usize)> {
    assert!(seg_len > 0, "segment length must be positive");
    (0..n_frames)
        .step_by(seg_len)
        .map(|s| (s, (s + seg_len).min(n_frames)))
        .collect()
}

/// Exact 0/1 knapsack: maximizes `Σ score·len` subject to `Σ len ≤ budget`.
/// Returns the selected shot indices in increasing order.
pub fn knapsack_select(lengths: &[usize], scores: &[f64], budget: usize) -> Result<Vec<usize>> {
    if lengths.len() != scores.len() {
        return Err(Error::dim("knapsack: one score per shot required"));
    }
    let n = lengths.len();
    let cap = budget.min(lengths.iter().sum());
    let mut best = vec![0.0f64; cap + 1];
    let mut take = vec![false; n * (cap + 1)];
    for (i, (&len, &score)) in lengths.iter().zip(scores).enumerate() {
        let value = score * len as f64;
        for c in (len..=cap).rev() {
            let cand = best[c - len] + value;
            if cand > best[c] {
                best[c] = cand;
                take[i * (cap + 1) + c] = true;
            }
        }
    }
    let mut chosen = Vec::new();
    let mut c = cap;
    for i in (0..n).rev() {
        if take[i * (cap + 1) + c] {
            chosen.push(i);
            c -= lengths[i];
        }
    }
    chosen.reverse();
    Ok(chosen)
}

/// Machine summary of a video: uniform shots scored by mean importance, then
/// knapsack-selected under the 15 % budget.
pub fn select_summary(scores: &[f64]) -> Result<Vec<bool>> {
    let shots = uniform_segments(scores.len(), SEGMENT_LEN);
    let lengths: Vec<usize> = shots.iter().map(|(s, e)| e - s).collect();
    let shot_scores: Vec<f64> = shots
        .iter()
        .map(|&(s, e)| scores[s..e].iter().sum::<f64>() / (e - s) as f64)
        .collect();
    let budget = (SUMMARY_BUDGET * scores.len() as f64).floor() as usize;
    let mut selected = vec![false; scores.len()];
    for i in knapsack_select(&lengths, &shot_scores, budget)? {
        let (s, e) = shots[i];
        selected[s..e].iter_mut().for_each(|v| *v = true);
    }
    Ok(selected)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FScore {
    pub max: f64,
    pub mean: f64,
}

/// Harmonic mean of precision and recall of the machine summary against each
/// user summary, aggregated by maximum and by mean.
pub fn fscore_summary(machine: &[bool], users: &[Vec<bool>]) -> Result<FScore> {
    if users.is_empty() {
        return Err(Error::Data("F-score needs at least one user summary".into()));
    }
    let m = machine.iter().filter(|&&b| b).count();
    let mut scores = Vec::with_capacity(users.len());
    for user in users {
        if user.len() != machine.len() {
            return Err(Error::dim(format!(
                "user summary has {} frames, machine summary {}",
                user.len(),
                machine.len()
            )));
        }
        let u = user.iter().filter(|&&b| b).count();
        let overlap = machine.iter().zip(user).filter(|(a, b)| **a && **b).count();
        let f = if overlap == 0 {
            0.0
        } else {
            let p = overlap as f64 / m as f64;
            let r = overlap as f64 / u as f64;
            2.0 * p * r / (p + r)
        };
        scores.push(f);
    }
    Ok(FScore {
        max: scores.iter().copied().fold(0.0, f64::max),
        mean: scores.iter().sum::<f64>() / scores.len() as f64,
    })
}

/// ROC-AUC of per-frame scores against binary labels.
pub fn roc_auc_frames(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::dim("one label per frame required"));
    }
    let pos: Vec<f64> = scores.iter().zip(labels).filter(|(_, &l)| l).map(|(&s, _)| s).collect();
    let neg: Vec<f64> = scores.iter().zip(labels).filter(|(_, &l)| !l).map(|(&s, _)| s).collect();
    roc_auc(&pos, &neg)
}

/// Line-oriented metric report.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricReport {
    rows: Vec<(String, String, f64)>,
}

impl MetricReport {
    pub fn push(&mut self, metric: &str, video: &str, value: f64) {
        self.rows.push((metric.to_string(), video.to_string(), value));
    }

    pub fn rows(&self) -> &[(String, String, f64)] {
        &self.rows
    }

    /// `metric<TAB>video<TAB>value` lines, six decimals.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (m, v, x) in &self.rows {
            writeln!(out, "{m}\t{v}\t{x:.6}").expect("writing to a String");
        }
        out
    }

    /// Mean of each metric over the videos it was reported for.
    pub fn means(&self) -> BTreeMap<String, f64> {
        let mut acc: BTreeMap<String, (f64, usize)> = BTreeMap::new();
        for (m, _, x) in &self.rows {
            let e = acc.entry(m.clone()).or_default();
            e.0 += x;
            e.1 += 1;
        }
        acc.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect()
    }

    /// JSON object of per-metric means and video counts.
    pub fn summary_json(&self) -> String {
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for (m, _, _) in &self.rows {
            *counts.entry(m).or_default() += 1;
        }
        let means: serde_json::Map<String, serde_json::Value> = self
            .means()
            .into_iter()
            .map(|(k, v)| {
                let n = counts[k.as_str()];
                (k, serde_json::json!({ "mean": v, "count": n }))
            })
            .collect();
        serde_json::to_string_pretty(&serde_json::Value::Object(means)).expect("serializable") + "\n"
    }
}
