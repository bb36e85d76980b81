use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{ClipShape, VideoRecord};
use crate::autodiff::kernels::bilinear;
use crate::error::{Error, Result};
use crate::losses::SaliencyTarget;
use crate::metrics::{gaussian_density, rasterize, uniform_segments, SEGMENT_LEN};
use crate::sample::{AnnotatedClip, Target};
use crate::tensor::Tensor;

pub const CLIP_FRAMES: usize = 16;
/// Upper median of a 16-frame clip.
pub const MEDIAN_FRAME: usize = CLIP_FRAMES / 2;
/// Crop side lengths relative to the shorter frame side.
pub const CROP_SCALES: [f64; 4] = [1.0, 0.84, 0.71, 0.59];
pub const SALIENCY_RESAMPLES: usize = 10;

/// Rectangular source region, optionally mirrored horizontally after resizing.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Crop {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
    pub flip: bool,
}

impl Crop {
    pub fn full(height: usize, width: usize, flip: bool) -> Self {
        Crop {
            top: 0,
            left: 0,
            height,
            width,
            flip,
        }
    }

    /// Square center crop of side `scale · min(H, W)`.
    pub fn center(height: usize, width: usize, scale: f64) -> Self {
        let side = square_side(height, width, scale);
        Crop {
            top: (height - side) / 2,
            left: (width - side) / 2,
            height: side,
            width: side,
            flip: false,
        }
    }

    /// Random scale, corner-or-center position and flip.
    pub fn random(height: usize, width: usize, rng: &mut ChaCha8Rng) -> Self {
        let scale = CROP_SCALES[rng.random_range(0..CROP_SCALES.len())];
        let side = square_side(height, width, scale);
        let (bottom, right) = (height - side, width - side);
        let (top, left) = match rng.random_range(0..5) {
            0 => (0, 0),
            1 => (0, right),
            2 => (bottom, 0),
            3 => (bottom, right),
            _ => (bottom / 2, right / 2),
        };
        Crop {
            top,
            left,
            height: side,
            width: side,
            flip: rng.random_bool(0.5),
        }
    }

    /// Maps a source pixel into output coordinates; `None` outside the crop.
    pub fn map_point(&self, (x, y): (usize, usize), out_h: usize, out_w: usize) -> Option<(usize, usize)> {
        if x < self.left || y < self.top || x >= self.left + self.width || y >= self.top + self.height {
            return None;
        }
        let scale = |v: usize, src: usize, dst: usize| {
            if src <= 1 {
                0
            } else {
                ((v as f64) * (dst - 1) as f64 / (src - 1) as f64).round() as usize
            }
        };
        let mut ox = scale(x - self.left, self.width, out_w);
        let oy = scale(y - self.top, self.height, out_h);
        if self.flip {
            ox = out_w - 1 - ox;
        }
        Some((ox, oy))
    }
}

fn square_side(height: usize, width: usize, scale: f64) -> usize {
    ((scale * height.min(width) as f64).round() as usize).clamp(1, height.min(width))
}

/// Source frame of clip slot `k` for a window at `start`; indices past the
/// end repeat the last frame.
pub(crate) fn source_frame(start: usize, k: usize, n: usize) -> usize {
    (start + k).min(n - 1)
}

/// Cuts `shape.frames` frames starting at `start`, crops, resizes to the
/// clip size and applies the flip.
pub fn extract_clip(frames: &Tensor, start: usize, shape: ClipShape, crop: &Crop) -> Result<Tensor> {
    let [c, n, h, w] = match frames.shape() {
        &[c, n, h, w] => [c, n, h, w],
        s => return Err(Error::dim(format!("frames must be [C, N, H, W], got {s:?}"))),
    };
    if crop.top + crop.height > h || crop.left + crop.width > w || crop.height == 0 || crop.width == 0 {
        return Err(Error::dim(format!("crop {crop:?} outside {h}x{w} frame")));
    }
    let t = shape.frames;
    let mut planes = Vec::with_capacity(c * t * crop.height * crop.width);
    for ch in 0..c {
        for k in 0..t {
            let src = source_frame(start, k, n);
            let base = (ch * n + src) * h * w;
            for y in crop.top..crop.top + crop.height {
                let row = base + y * w;
                planes.extend_from_slice(&frames.data()[row + crop.left..row + crop.left + crop.width]);
            }
        }
    }
    let mut out = bilinear(&planes, c * t, (crop.height, crop.width), (shape.height, shape.width));
    if crop.flip {
        for row in out.chunks_mut(shape.width) {
            row.reverse();
        }
    }
    Tensor::new(vec![c, t, shape.height, shape.width], out)
}

fn max_start(n: usize, t: usize) -> usize {
    n.saturating_sub(t)
}

/// Random window with multi-scale corner/center cropping and flipping.
pub fn sample_action_clip(record: &VideoRecord, shape: ClipShape, rng: &mut ChaCha8Rng) -> Result<AnnotatedClip> {
    let class = record
        .class
        .ok_or_else(|| Error::Data(format!("{}: no action label", record.id)))?;
    let start = rng.random_range(0..=max_start(record.len(), shape.frames));
    let crop = Crop::random(record.height(), record.width(), rng);
    Ok(AnnotatedClip {
        clip: extract_clip(&record.frames, start, shape, &crop)?,
        target: Target::Action(class),
    })
}

/// Clip inside 90-frame segment `segment`, labelled with the mean importance
/// of its frames.
pub fn sample_summary_clip(
    record: &VideoRecord,
    segment: usize,
    shape: ClipShape,
    rng: &mut ChaCha8Rng,
) -> Result<AnnotatedClip> {
    let importance = record
        .importance
        .as_ref()
        .ok_or_else(|| Error::Data(format!("{}: no importance annotation", record.id)))?;
    let segments = uniform_segments(record.len(), SEGMENT_LEN);
    let &(s, e) = segments
        .get(segment)
        .ok_or_else(|| Error::Data(format!("{}: segment {segment} out of range", record.id)))?;
    let last = if e - s >= shape.frames { e - shape.frames } else { s };
    let start = rng.random_range(s..=last);
    let crop = Crop::random(record.height(), record.width(), rng);
    let n = record.len();
    let y = (0..shape.frames).map(|k| importance[source_frame(start, k, n)]).sum::<f64>() / shape.frames as f64;
    Ok(AnnotatedClip {
        clip: extract_clip(&record.frames, start, shape, &crop)?,
        target: Target::Summary(y),
    })
}

/// Uncropped clip whose target is built from the fixations of its median
/// frame; windows whose median frame has no fixations are redrawn.
pub fn sample_saliency_clip(record: &VideoRecord, shape: ClipShape, rng: &mut ChaCha8Rng) -> Result<AnnotatedClip> {
    let fixations = record
        .fixations
        .as_ref()
        .ok_or_else(|| Error::Data(format!("{}: no fixations", record.id)))?;
    let n = record.len();
    for _ in 0..SALIENCY_RESAMPLES {
        let start = rng.random_range(0..=max_start(n, shape.frames));
        let flip = rng.random_bool(0.5);
        let median = source_frame(start, shape.frames / 2, n);
        if fixations.frames[median].is_empty() {
            continue;
        }
        let crop = Crop::full(record.height(), record.width(), flip);
        let points: Vec<(usize, usize)> = fixations.frames[median]
            .iter()
            .filter_map(|&p| crop.map_point(p, shape.height, shape.width))
            .collect();
        let fix = rasterize(&points, shape.height, shape.width);
        let den = gaussian_density(&fix, shape.height as f64 / 20.0)?;
        return Ok(AnnotatedClip {
            clip: extract_clip(&record.frames, start, shape, &crop)?,
            target: Target::Saliency(SaliencyTarget::new(fix, den)?),
        });
    }
    Err(Error::Data(format!(
        "{}: no window with a fixated median frame after {SALIENCY_RESAMPLES} draws",
        record.id
    )))
}
