use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::VideoRecord;
use crate::error::{Error, Result};
use crate::metrics::FixationSet;
use crate::tensor::Tensor;

pub const MAX_SYNTH_CLASSES: usize = 8;
const VIEWERS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SynthConfig {
    pub videos: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub classes: usize,
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 || self.classes > MAX_SYNTH_CLASSES {
            return Err(Error::Config(format!(
                "classes must be between 1 and {MAX_SYNTH_CLASSES}, got {}",
                self.classes
            )));
        }
        if self.frames < 2 {
            return Err(Error::Config("videos need at least 2 frames".into()));
        }
        if self.height < 8 || self.width < 8 {
            return Err(Error::Config("frames must be at least 8x8".into()));
        }
        Ok(())
    }
}

/// Bright Gaussian blob moving over noise. The motion pattern is the class:
/// 0 horizontal, 1 vertical, 2 circular, 3 stationary, 4 diagonal,
/// 5 fast horizontal, 6 fast vertical, 7 pulsing. Viewers fixate the blob;
/// importance is 1 while it is visible and 0 during blank spans.
pub fn synth_generate(seed: u64, cfg: &SynthConfig) -> Result<Vec<VideoRecord>> {
    cfg.validate()?;
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    (0..cfg.videos)
        .map(|v| {
            let video_seed: u64 = master.random();
            generate_one(video_seed, v, v % cfg.classes, cfg)
        })
        .collect()
}

fn generate_one(seed: u64, index: usize, class: usize, cfg: &SynthConfig) -> Result<VideoRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, h, w) = (cfg.frames, cfg.height, cfg.width);
    let (hf, wf) = (h as f64, w as f64);
    let radius = 0.14 * hf.min(wf);
    let amp = 0.28 * hf.min(wf);
    let (cx0, cy0) = (rng.random_range(0.35..0.65) * wf, rng.random_range(0.35..0.65) * hf);
    let period = rng.random_range(12.0..20.0);
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    let color: [f64; 3] = [rng.random_range(0.7..1.0), rng.random_range(0.7..1.0), rng.random_range(0.7..1.0)];

    let mut visible = vec![true; n];
    let spans = if n >= 150 { 2 } else { 1 };
    for _ in 0..spans {
        let len = rng.random_range((n / 6).max(1)..=(n / 4).max(1)).min(n - 1);
        let start = rng.random_range(0..=n - len);
        visible[start..start + len].iter_mut().for_each(|v| *v = false);
    }
    if visible.iter().all(|&v| !v) {
        visible[0] = true;
    }

    let jitter = Normal::new(0.0, radius / 2.0).expect("positive deviation");
    let mut frames = vec![0.0; 3 * n * h * w];
    let mut fixations = vec![Vec::new(); n];
    for t in 0..n {
        let angle = std::f64::consts::TAU * t as f64 / period + phase;
        let (dx, dy, scale) = match class {
            0 => (angle.sin(), 0.0, 1.0),
            1 => (0.0, angle.sin(), 1.0),
            2 => (angle.cos(), sign * angle.sin(), 1.0),
            3 => (0.0, 0.0, 1.0),
            4 => (angle.sin() * 0.7, sign * angle.sin() * 0.7, 1.0),
            5 => ((2.5 * angle).sin(), 0.0, 1.0),
            6 => (0.0, (2.5 * angle).sin(), 1.0),
            _ => (0.0, 0.0, 1.0 + 0.6 * angle.sin()),
        };
        let (cx, cy) = (cx0 + amp * dx, cy0 + amp * dy);
        let r = radius * scale;
        for y in 0..h {
            for x in 0..w {
                let noise = 0.15 + 0.1 * rng.random::<f64>();
                let blob = if visible[t] {
                    let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                    0.8 * (-d2 / (2.0 * r * r)).exp()
                } else {
                    0.0
                };
                for (c, col) in color.iter().enumerate() {
                    frames[((c * n + t) * h + y) * w + x] = (noise + col * blob).min(1.0);
                }
            }
        }
        if visible[t] {
            for _ in 0..VIEWERS {
                let fx = (cx + jitter.sample(&mut rng)).round().clamp(0.0, wf - 1.0) as usize;
                let fy = (cy + jitter.sample(&mut rng)).round().clamp(0.0, hf - 1.0) as usize;
                fixations[t].push((fx, fy));
            }
        }
    }
    Ok(VideoRecord {
        id: format!("video_{index:03}"),
        frames: Tensor::new(vec![3, n, h, w], frames)?,
        fixations: Some(FixationSet::new(w, h, fixations)?),
        class: Some(class),
        importance: Some(visible.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect()),
    })
}
