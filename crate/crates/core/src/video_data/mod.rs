//! Videos, clips and frames, plus the synthetic corpus and dataset ingestion.

mod augment;
mod generator;
mod loader;
mod sampling;

pub use augment::{augment, center_crop, AugmentConfig, CropGeometry};
pub use generator::{generate_corpus, generate_synthetic_video, Corpus, SceneConfig, MAX_PART_CLASSES};
pub use loader::{load_frame_directory, write_frame_directory};
pub use sampling::{make_training_sample, TrainingSample};

use ndarray::{s, Array3, Array4};

use crate::error::{Error, Result};

/// A full source video. `frames` is laid out `(F, H, W, 3)` with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceVideo {
    pub frames: Array4<f64>,
    /// Per-frame class-index maps `(F, H, W)`.
    pub parsing_gt: Option<Array3<u8>>,
    pub action_label: usize,
    pub video_id: String,
}

impl SourceVideo {
    pub fn new(
        frames: Array4<f64>,
        parsing_gt: Option<Array3<u8>>,
        action_label: usize,
        video_id: impl Into<String>,
    ) -> Result<Self> {
        let video_id = video_id.into();
        let (f, h, w, c) = frames.dim();
        if c != 3 {
            return Err(Error::Dataset {
                video_id,
                message: format!("expected 3 colour channels, got {c}"),
            });
        }
        if f == 0 {
            return Err(Error::Dataset {
                video_id,
                message: "video has no frames".into(),
            });
        }
        if let Some(gt) = &parsing_gt {
            if gt.dim() != (f, h, w) {
                return Err(Error::Dataset {
                    video_id,
                    message: format!(
                        "parsing maps have shape {:?}, frames have ({f}, {h}, {w})",
                        gt.dim()
                    ),
                });
            }
        }
        Ok(Self {
            frames,
            parsing_gt,
            action_label,
            video_id,
        })
    }

    pub fn frame_count(&self) -> usize {
        self.frames.dim().0
    }

    pub fn height(&self) -> usize {
        self.frames.dim().1
    }

    pub fn width(&self) -> usize {
        self.frames.dim().2
    }

    /// Number of valid start offsets for a clip of `length` frames at `speed`.
    pub fn start_count(&self, speed: usize, length: usize) -> usize {
        let span = (length.max(1) - 1) * speed + 1;
        self.frame_count().saturating_sub(span - 1)
    }
}

/// A clip of `T` frames laid out `(T, H, W, 3)`.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoClip {
    pub frames: Array4<f64>,
    pub source_id: String,
    pub frame_indices: Vec<usize>,
    pub speed: usize,
    /// Geometric transform applied when the clip was augmented, in source coordinates.
    pub geometry: Option<CropGeometry>,
}

impl VideoClip {
    pub fn len(&self) -> usize {
        self.frames.dim().0
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn height(&self) -> usize {
        self.frames.dim().1
    }

    pub fn width(&self) -> usize {
        self.frames.dim().2
    }
}

/// A single frame `(H, W, 3)`, tied to its source video and frame index.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub pixels: Array3<f64>,
    pub clip_source: String,
    pub source_index: usize,
    /// Geometry that maps this frame into the coordinates of an augmented clip.
    pub geometry: Option<CropGeometry>,
}

/// Take `length` frames starting at `start` with stride `speed`.
pub fn sample_clip(video: &SourceVideo, speed: usize, length: usize, start: usize) -> Result<VideoClip> {
    if speed == 0 || length == 0 {
        return Err(Error::Config(format!(
            "clip speed and length must be positive (speed {speed}, length {length})"
        )));
    }
    let frames = video.frame_count();
    let last = start + (length - 1) * speed;
    if last >= frames {
        return Err(Error::WindowOutOfRange {
            start,
            length,
            speed,
            frames,
        });
    }
    let frame_indices: Vec<usize> = (0..length).map(|k| start + k * speed).collect();
    let clip = video.frames.slice(s![start..=last;speed, .., .., ..]).to_owned();
    Ok(VideoClip {
        frames: clip,
        source_id: video.video_id.clone(),
        frame_indices,
        speed,
        geometry: None,
    })
}

/// Position of the middle frame inside a clip of length `t`.
pub fn middle_index(t: usize) -> usize {
    t / 2
}

/// The frame at clip position `floor(T / 2)`.
pub fn middle_frame(clip: &VideoClip) -> Result<Frame> {
    if clip.is_empty() {
        return Err(Error::EmptyClip);
    }
    let pos = middle_index(clip.len());
    Ok(Frame {
        pixels: clip.frames.slice(s![pos, .., .., ..]).to_owned(),
        clip_source: clip.source_id.clone(),
        source_index: clip.frame_indices[pos],
        geometry: clip.geometry,
    })
}
