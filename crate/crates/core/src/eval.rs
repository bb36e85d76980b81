//! Per-task evaluation over a dataset, reported per video.

use std::fs;
use std::path::Path;

use crate::data::{sliding_inference, VideoRecord};
use crate::error::{Error, Result};
use crate::metrics::{
    auc_judd, fscore_summary, gaussian_density, metric_cc, metric_nss, roc_auc_frames, select_summary, shuffled_auc,
    FScore, FixationSet, MetricReport,
};
use crate::model::Susinet;
use crate::task::{Task, TaskSet};
use crate::tensor::Tensor;

pub const REPORT_TSV: &str = "report.tsv";
pub const SUMMARY_JSON: &str = "summary.json";

/// Frames with importance at or above this value count as key frames.
pub const KEY_FRAME_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SaliencyScores {
    pub cc: f64,
    pub nss: f64,
    pub auc_j: f64,
    /// `None` when no frame had a non-empty negative pool.
    pub sauc: Option<f64>,
}

/// Averages the four saliency metrics over every frame that has fixations.
pub fn saliency_video_metrics(maps: &[Tensor], fixations: &FixationSet) -> Result<SaliencyScores> {
    if maps.len() != fixations.len() {
        return Err(Error::dim(format!(
            "{} maps for {} annotated frames",
            maps.len(),
            fixations.len()
        )));
    }
    let sigma = fixations.height as f64 / 20.0;
    let (mut cc, mut nss, mut auc, mut sauc) = (0.0, 0.0, 0.0, 0.0);
    let (mut n, mut n_sauc) = (0usize, 0usize);
    for (t, p) in maps.iter().enumerate() {
        let pts = &fixations.frames[t];
        if pts.is_empty() {
            continue;
        }
        let fix = fixations.rasterize(t);
        let den = gaussian_density(&fix, sigma)?;
        cc += metric_cc(p, &den)?;
        nss += metric_nss(p, &fix)?;
        auc += auc_judd(p, &fix)?;
        let negatives = fixations.shuffled_negatives(t);
        if !negatives.is_empty() {
            sauc += shuffled_auc(p, pts, &negatives)?;
            n_sauc += 1;
        }
        n += 1;
    }
    if n == 0 {
        return Err(Error::Data("no frame carries fixations".into()));
    }
    let k = n as f64;
    Ok(SaliencyScores {
        cc: cc / k,
        nss: nss / k,
        auc_j: auc / k,
        sauc: (n_sauc > 0).then(|| sauc / n_sauc as f64),
    })
}

/// Reference key shots are selected from the ground-truth importance the same
/// way as machine shots; ROC-AUC labels are importance >= 0.5.
pub fn summary_video_metrics(scores: &[f64], importance: &[f64]) -> Result<(FScore, f64)> {
    let machine = select_summary(scores)?;
    let reference = select_summary(importance)?;
    let f = fscore_summary(&machine, &[reference])?;
    let labels: Vec<bool> = importance.iter().map(|&v| v >= KEY_FRAME_THRESHOLD).collect();
    Ok((f, roc_auc_frames(scores, &labels)?))
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn require(record: &VideoRecord, task: Task) -> Result<()> {
    let present = match task {
        Task::Saliency => record.fixations.is_some(),
        Task::Action => record.class.is_some(),
        Task::Summary => record.importance.is_some(),
    };
    if present {
        Ok(())
    } else {
        Err(Error::Data(format!("{}: missing {task} annotations", record.id)))
    }
}

/// Scores `model` on every record for every task in `tasks`, task-major.
pub fn evaluate(model: &Susinet, records: &[VideoRecord], tasks: TaskSet) -> Result<MetricReport> {
    if !tasks.is_subset(&model.config().heads) {
        return Err(Error::Config(format!(
            "checkpoint has heads '{}' but evaluation asks for '{tasks}'",
            model.config().heads
        )));
    }
    for task in tasks.iter() {
        for r in records {
            require(r, task)?;
        }
    }
    let mut report = MetricReport::default();
    for task in tasks.iter() {
        for r in records {
            let out = sliding_inference(r, model, task)?;
            match task {
                Task::Saliency => {
                    let maps = out.saliency_maps.as_deref().unwrap_or_default();
                    let s = saliency_video_metrics(maps, r.fixations.as_ref().expect("checked"))?;
                    report.push("cc", &r.id, s.cc);
                    report.push("nss", &r.id, s.nss);
                    report.push("auc_j", &r.id, s.auc_j);
                    if let Some(v) = s.sauc {
                        report.push("sauc", &r.id, v);
                    }
                }
                Task::Action => {
                    let probs = out.action_probs.as_deref().unwrap_or_default();
                    let hit = Some(argmax(probs)) == r.class;
                    report.push("accuracy", &r.id, if hit { 1.0 } else { 0.0 });
                }
                Task::Summary => {
                    let scores = out.frame_scores.as_deref().unwrap_or_default();
                    let (f, auc) = summary_video_metrics(scores, r.importance.as_deref().expect("checked"))?;
                    report.push("fscore_max", &r.id, f.max);
                    report.push("fscore_mean", &r.id, f.mean);
                    report.push("roc_auc", &r.id, auc);
                }
            }
        }
    }
    Ok(report)
}

pub fn write_report(dir: &Path, report: &MetricReport) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (name, text) in [(REPORT_TSV, report.to_text()), (SUMMARY_JSON, report.summary_json())] {
        let p = dir.join(name);
        fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_generate, SynthConfig};
    use crate::model::NetworkConfig;

    #[test]
    fn oracle_summary_scores_are_perfect() {
        let cfg = SynthConfig {
            videos: 3,
            frames: 400,
            height: 8,
            width: 8,
            classes: 1,
        };
        for r in synth_generate(5, &cfg).unwrap() {
            let imp = r.importance.unwrap();
            let (f, auc) = summary_video_metrics(&imp, &imp).unwrap();
            assert_eq!(f.max, 1.0);
            assert_eq!(f.mean, 1.0);
            assert_eq!(auc, 1.0);
        }
    }

    #[test]
    fn oracle_saliency_maps_beat_chance() {
        let cfg = SynthConfig {
            videos: 1,
            frames: 20,
            height: 24,
            width: 24,
            classes: 1,
        };
        let r = synth_generate(3, &cfg).unwrap().remove(0);
        let fix = r.fixations.unwrap();
        let maps: Vec<Tensor> = (0..fix.len())
            .map(|t| gaussian_density(&fix.rasterize(t), 1.2).unwrap())
            .collect();
        let s = saliency_video_metrics(&maps, &fix).unwrap();
        assert!(s.auc_j > 0.9 && s.cc > 0.5 && s.nss > 1.0, "{s:?}");
    }

    fn small_model(classes: usize, seed: u64) -> Susinet {
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

    #[test]
    fn untrained_network_scores_chance_auc() {
        let cfg = SynthConfig {
            videos: 1,
            frames: 20,
            height: 32,
            width: 32,
            classes: 1,
        };
        let mut total = 0.0;
        for seed in 0..20 {
            let r = synth_generate(seed, &cfg).unwrap().remove(0);
            let model = small_model(1, seed);
            let out = sliding_inference(&r, &model, Task::Saliency).unwrap();
            let s = saliency_video_metrics(out.saliency_maps.as_deref().unwrap(), r.fixations.as_ref().unwrap());
            total += s.unwrap().auc_j;
        }
        let mean = total / 20.0;
        assert!((mean - 0.5).abs() <= 0.05, "{mean}");
    }

    #[test]
    fn missing_annotations_are_a_data_error() {
        let cfg = SynthConfig {
            videos: 2,
            frames: 20,
            height: 16,
            width: 16,
            classes: 2,
        };
        let mut recs = synth_generate(1, &cfg).unwrap();
        recs[1].importance = None;
        let model = small_model(2, 1);
        let err = evaluate(&model, &recs, TaskSet::only(Task::Summary)).unwrap_err();
        assert!(matches!(&err, Error::Data(m) if m.contains("video_001")), "{err}");
        let report = evaluate(&model, &recs, TaskSet::only(Task::Action)).unwrap();
        assert_eq!(report.rows().len(), 2);
        assert!(report.rows().iter().all(|r| r.0 == "accuracy"));
    }
}
