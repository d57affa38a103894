//! Ground truth, videos, synthetic occlusion scenes and MOT ingestion.

mod io;
mod mot;
mod synth;

pub use io::{load_dataset, read_ppm, save_dataset, write_ppm};
pub use mot::{emit_mot_gt, parse_mot_gt, MotOptions, MotParse};
pub use synth::{
    generate_dataset, generate_ground_truth, generate_video, hidden_fraction, tune_hidden_fraction, visibility,
    DatasetConfig, SyntheticSceneConfig,
};

use serde::{Deserialize, Serialize};

use crate::detector::BBox;
use crate::tensor::Tensor;

/// Visibility below which a ground-truth box counts as hidden.
pub const HIDDEN_BELOW: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    /// 0-based.
    pub frame_index: usize,
    pub track_id: i64,
    pub bbox: BBox,
    /// Visible fraction of the object in `[0, 1]`.
    pub visibility: f64,
    pub class_id: i64,
}

impl GroundTruth {
    pub fn is_hidden(&self) -> bool {
        self.visibility < HIDDEN_BELOW
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Video {
    pub name: String,
    /// `[3, H, W]` frames with values in `[0, 1]`.
    pub frames: Vec<Tensor>,
    pub gt: Vec<GroundTruth>,
    /// Per frame: whether ground truth is provided for it.
    pub annotated: Vec<bool>,
}

impl Video {
    /// Fully annotated video.
    pub fn new(name: impl Into<String>, frames: Vec<Tensor>, gt: Vec<GroundTruth>) -> Self {
        let annotated = vec![true; frames.len()];
        Self {
            name: name.into(),
            frames,
            gt,
            annotated,
        }
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Ground truth grouped by frame.
    pub fn gt_by_frame(&self) -> Vec<Vec<GroundTruth>> {
        let mut out = vec![Vec::new(); self.frames.len()];
        for g in &self.gt {
            if let Some(slot) = out.get_mut(g.frame_index) {
                slot.push(*g);
            }
        }
        out
    }

    /// Frames `range` as a new video with frame indices rebased to 0.
    pub fn segment(&self, start: usize, end: usize, suffix: &str) -> Video {
        let end = end.min(self.frames.len());
        let start = start.min(end);
        Video {
            name: format!("{}{suffix}", self.name),
            frames: self.frames[start..end].to_vec(),
            gt: self
                .gt
                .iter()
                .filter(|g| (start..end).contains(&g.frame_index))
                .map(|g| GroundTruth {
                    frame_index: g.frame_index - start,
                    ..*g
                })
                .collect(),
            annotated: self.annotated[start..end].to_vec(),
        }
    }
}

/// Number of leading frames of an `n`-frame video used for training.
pub fn train_frames(n: usize) -> usize {
    n * 4 / 5
}

/// Temporal 80/20 split of every video: the first `floor(0.8·N)` frames
/// train, the rest test.
pub fn split_train_test(videos: &[Video]) -> (Vec<Video>, Vec<Video>) {
    videos
        .iter()
        .map(|v| {
            let k = train_frames(v.len());
            (v.segment(0, k, ""), v.segment(k, v.len(), ""))
        })
        .unzip()
}
