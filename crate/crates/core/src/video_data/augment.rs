use ndarray::{Array4, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::VideoClip;
use crate::error::{Error, Result};
use crate::resample::bilinear_at;
use crate::rng::rng_for;

/// Crop window in source pixel units (continuous edge coordinates) plus an
/// optional horizontal flip. Maps any output grid back into the source frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CropGeometry {
    pub y0: f64,
    pub x0: f64,
    pub height: f64,
    pub width: f64,
    pub flip: bool,
}

impl CropGeometry {
    pub fn full(height: usize, width: usize) -> Self {
        Self {
            y0: 0.0,
            x0: 0.0,
            height: height as f64,
            width: width as f64,
            flip: false,
        }
    }

    /// Source pixel-centre coordinates of output pixel `(i, j)` on an `out_h x out_w` grid.
    pub fn source_coords(&self, i: usize, j: usize, out_h: usize, out_w: usize) -> (f64, f64) {
        let v = (i as f64 + 0.5) / out_h as f64;
        let mut u = (j as f64 + 0.5) / out_w as f64;
        if self.flip {
            u = 1.0 - u;
        }
        (self.y0 + v * self.height - 0.5, self.x0 + u * self.width - 0.5)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub out_height: usize,
    pub out_width: usize,
    /// Range of the crop area as a fraction of the frame area.
    pub crop_scale: [f64; 2],
    /// Range of crop aspect ratios (width / height).
    pub crop_aspect: [f64; 2],
    pub flip_prob: f64,
    /// Jitter factors are drawn uniformly from `[1 - x, 1 + x]`.
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            out_height: 32,
            out_width: 32,
            crop_scale: [0.6, 1.0],
            crop_aspect: [0.8, 1.25],
            flip_prob: 0.5,
            brightness: 0.3,
            contrast: 0.3,
            saturation: 0.3,
        }
    }
}

impl AugmentConfig {
    /// No colour jitter, no flip, full-frame crop.
    pub fn identity(out_height: usize, out_width: usize) -> Self {
        Self {
            out_height,
            out_width,
            crop_scale: [1.0, 1.0],
            crop_aspect: [1.0, 1.0],
            flip_prob: 0.0,
            brightness: 0.0,
            contrast: 0.0,
            saturation: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("augment: {m}")));
        if self.out_height < 4 || self.out_width < 4 {
            return bad("output crop must be at least 4x4");
        }
        let [s0, s1] = self.crop_scale;
        if !(s0 > 0.0 && s0 <= s1 && s1 <= 1.0) {
            return bad("crop_scale must satisfy 0 < min <= max <= 1");
        }
        let [a0, a1] = self.crop_aspect;
        if !(a0 > 0.0 && a0 <= a1) {
            return bad("crop_aspect must satisfy 0 < min <= max");
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return bad("flip_prob must lie in [0, 1]");
        }
        for (name, v) in [
            ("brightness", self.brightness),
            ("contrast", self.contrast),
            ("saturation", self.saturation),
        ] {
            if !(0.0..1.0).contains(&v) {
                return bad(&format!("{name} jitter must lie in [0, 1)"));
            }
        }
        Ok(())
    }
}

/// Resample every frame of `clip` through `geometry` onto an `out_h x out_w` grid.
fn warp(clip: &VideoClip, geometry: &CropGeometry, out_h: usize, out_w: usize) -> Array4<f64> {
    let t = clip.len();
    let mut out = Array4::zeros((t, out_h, out_w, 3));
    let mut px = [0.0; 3];
    for k in 0..t {
        let src = clip.frames.index_axis(Axis(0), k);
        for i in 0..out_h {
            for j in 0..out_w {
                let (y, x) = geometry.source_coords(i, j, out_h, out_w);
                bilinear_at(src, y, x, &mut px);
                for ch in 0..3 {
                    out[[k, i, j, ch]] = px[ch];
                }
            }
        }
    }
    out
}

/// The largest centred crop with the output aspect ratio, resized to the output size.
pub fn center_crop(clip: &VideoClip, out_h: usize, out_w: usize) -> VideoClip {
    let (h, w) = (clip.height() as f64, clip.width() as f64);
    let target = out_w as f64 / out_h as f64;
    let (ch, cw) = if w / h > target { (h, h * target) } else { (w / target, w) };
    let geometry = CropGeometry {
        y0: (h - ch) / 2.0,
        x0: (w - cw) / 2.0,
        height: ch,
        width: cw,
        flip: false,
    };
    VideoClip {
        frames: warp(clip, &geometry, out_h, out_w),
        geometry: Some(compose(clip.geometry, geometry, clip.height(), clip.width())),
        ..clip.clone()
    }
}

/// Express `inner` (given in the pixel coordinates of a clip of size
/// `clip_h x clip_w`) in the coordinates of the clip's source frames.
fn compose(outer: Option<CropGeometry>, inner: CropGeometry, clip_h: usize, clip_w: usize) -> CropGeometry {
    let Some(outer) = outer else { return inner };
    let sy = outer.height / clip_h as f64;
    let sx = outer.width / clip_w as f64;
    let x0 = if outer.flip {
        outer.x0 + outer.width - (inner.x0 + inner.width) * sx
    } else {
        outer.x0 + inner.x0 * sx
    };
    CropGeometry {
        y0: outer.y0 + inner.y0 * sy,
        x0,
        height: inner.height * sy,
        width: inner.width * sx,
        flip: outer.flip != inner.flip,
    }
}

fn draw_geometry(rng: &mut impl Rng, cfg: &AugmentConfig, h: f64, w: f64) -> CropGeometry {
    let area = h * w;
    let scale = rng.gen_range(cfg.crop_scale[0]..=cfg.crop_scale[1]);
    let (la, lb) = (cfg.crop_aspect[0].ln(), cfg.crop_aspect[1].ln());
    let aspect = rng.gen_range(la..=lb).exp();
    let cw = (area * scale * aspect).sqrt().min(w);
    let ch = (area * scale / aspect).sqrt().min(h);
    let y0 = rng.gen_range(0.0..=(h - ch));
    let x0 = rng.gen_range(0.0..=(w - cw));
    let flip = rng.gen_bool(cfg.flip_prob);
    CropGeometry {
        y0,
        x0,
        height: ch,
        width: cw,
        flip,
    }
}

/// Random resized crop, horizontal flip and colour jitter, identical for every
/// frame of the clip and fully determined by `seed`. Output is clamped to `[0, 1]`.
pub fn augment(clip: &VideoClip, cfg: &AugmentConfig, seed: u64) -> Result<VideoClip> {
    if clip.is_empty() {
        return Err(Error::EmptyClip);
    }
    let mut rng = rng_for(seed, &[0xA06]);
    let geometry = draw_geometry(&mut rng, cfg, clip.height() as f64, clip.width() as f64);
    let brightness = rng.gen_range(1.0 - cfg.brightness..=1.0 + cfg.brightness);
    let contrast = rng.gen_range(1.0 - cfg.contrast..=1.0 + cfg.contrast);
    let saturation = rng.gen_range(1.0 - cfg.saturation..=1.0 + cfg.saturation);

    let mut frames = warp(clip, &geometry, cfg.out_height, cfg.out_width);
    let jitter = cfg.brightness > 0.0 || cfg.contrast > 0.0 || cfg.saturation > 0.0;
    if jitter {
        for mut frame in frames.axis_iter_mut(Axis(0)) {
            frame.mapv_inplace(|v| v * brightness);
            let mean_gray = frame
                .lanes(Axis(2))
                .into_iter()
                .map(|p| gray(p[0], p[1], p[2]))
                .sum::<f64>()
                / (cfg.out_height * cfg.out_width) as f64;
            for mut p in frame.lanes_mut(Axis(2)) {
                let g = gray(p[0], p[1], p[2]);
                for ch in 0..3 {
                    let sat = g + (p[ch] - g) * saturation;
                    p[ch] = mean_gray + (sat - mean_gray) * contrast;
                }
            }
        }
    }
    frames.mapv_inplace(|v| v.clamp(0.0, 1.0));
    Ok(VideoClip {
        frames,
        source_id: clip.source_id.clone(),
        frame_indices: clip.frame_indices.clone(),
        speed: clip.speed,
        geometry: Some(compose(clip.geometry, geometry, clip.height(), clip.width())),
    })
}

fn gray(r: f64, g: f64, b: f64) -> f64 {
    0.299 * r + 0.587 * g + 0.114 * b
}
