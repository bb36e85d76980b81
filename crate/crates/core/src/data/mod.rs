//! Video records, the synthetic generator, clip sampling with augmentation,
//! sliding-window inference and the on-disk dataset container.

mod inference;
mod io;
mod sampling;
mod synth;

pub use inference::{sliding_inference, InferenceOutput, Window};
pub use io::{read_dataset, read_record, write_dataset, write_record};
pub use sampling::{
    extract_clip, sample_action_clip, sample_saliency_clip, sample_summary_clip, Crop, CLIP_FRAMES, CROP_SCALES,
    MEDIAN_FRAME, SALIENCY_RESAMPLES,
};
pub use synth::{synth_generate, SynthConfig, MAX_SYNTH_CLASSES};

use crate::error::{Error, Result};
use crate::metrics::FixationSet;
use crate::model::NetworkConfig;
use crate::tensor::Tensor;

/// One video with whichever annotations it carries.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoRecord {
    pub id: String,
    /// `[3, N, H, W]`, values in `[0, 1]`.
    pub frames: Tensor,
    pub fixations: Option<FixationSet>,
    pub class: Option<usize>,
    /// Per-frame importance in `[0, 1]`.
    pub importance: Option<Vec<f64>>,
}

impl VideoRecord {
    pub fn len(&self) -> usize {
        self.frames.shape()[1]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn height(&self) -> usize {
        self.frames.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.frames.shape()[3]
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames.rank() != 4 || self.frames.shape()[0] != 3 {
            return Err(Error::Data(format!("{}: frames must be [3, N, H, W], got {:?}", self.id, self.frames.shape())));
        }
        if let Some(f) = &self.fixations {
            if f.len() != self.len() || f.width != self.width() || f.height != self.height() {
                return Err(Error::Data(format!("{}: fixation set does not match the video", self.id)));
            }
        }
        if let Some(imp) = &self.importance {
            if imp.len() != self.len() {
                return Err(Error::Data(format!(
                    "{}: {} importance values for {} frames",
                    self.id,
                    imp.len(),
                    self.len()
                )));
            }
            if imp.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::Data(format!("{}: importance outside [0, 1]", self.id)));
            }
        }
        Ok(())
    }
}

/// Frame count and spatial size of network input clips.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClipShape {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
}

impl From<&NetworkConfig> for ClipShape {
    fn from(c: &NetworkConfig) -> Self {
        ClipShape {
            frames: c.frames,
            height: c.height,
            width: c.width,
        }
    }
}
