use std::path::Path;

use image::{Rgb, RgbImage};
use ndarray::{Array2, Array3, ArrayView3, ArrayView4, Axis};
use serde::{Deserialize, Serialize};

use super::probe::LinearClassifier;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::resample::resize_bilinear;
use crate::video_data::VideoClip;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VizConfig {
    pub cam_height: usize,
    pub cam_width: usize,
    /// Opacity of the heatmap over the frame.
    pub alpha: f64,
    /// Test videos rendered per action class by the visualize command.
    pub videos_per_class: usize,
}

impl Default for VizConfig {
    fn default() -> Self {
        Self {
            cam_height: 32,
            cam_width: 32,
            alpha: 0.5,
            videos_per_class: 1,
        }
    }
}

/// Class-activation heatmap in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CamMap {
    pub heat: Array2<f64>,
    pub class_id: usize,
    pub video_id: String,
    /// Source index of the clip's middle frame.
    pub frame_index: usize,
}

/// `relu(mean_t(sum_c w_c f[c, t]))`, bilinearly resized and divided by its
/// maximum. An all-non-positive map gives all zeros.
pub fn cam_from_features(features: ArrayView4<f64>, class_weights: &[f64], out_h: usize, out_w: usize) -> Result<Array2<f64>> {
    let (c, t, h, w) = features.dim();
    if class_weights.len() != c {
        return Err(Error::Shape(format!(
            "probe has {} weights per class but the feature map has {c} channels",
            class_weights.len()
        )));
    }
    let mut map = Array3::<f64>::zeros((h, w, 1));
    for (ch, &wc) in class_weights.iter().enumerate() {
        let fc = features.index_axis(Axis(0), ch);
        for ti in 0..t {
            for i in 0..h {
                for j in 0..w {
                    map[[i, j, 0]] += wc * fc[[ti, i, j]];
                }
            }
        }
    }
    map.mapv_inplace(|v| (v / t as f64).max(0.0));
    let up = resize_bilinear(map.view(), out_h, out_w).index_axis_move(Axis(2), 0);
    let max = up.fold(0.0f64, |m, &v| m.max(v));
    Ok(if max > 0.0 { up / max } else { up })
}

/// CAM of `class_id` for `clip`. `probe` must have been fit on the
/// global-average-pooled output of the shared encoder.
pub fn cam_heatmap(model: &Model, probe: &LinearClassifier, clip: &VideoClip, class_id: usize, out_h: usize, out_w: usize) -> Result<CamMap> {
    if class_id >= probe.num_classes() {
        return Err(Error::Shape(format!("class {class_id} out of range for {} classes", probe.num_classes())));
    }
    let low = model.low_features(clip)?;
    let low = low.into_dimensionality().map_err(|_| Error::Shape("shared encoder output is not 4-D".into()))?;
    let heat = cam_from_features(low.view(), &probe.raw_class_weights(class_id), out_h, out_w)?;
    Ok(CamMap {
        heat,
        class_id,
        video_id: clip.source_id.clone(),
        frame_index: clip.frame_indices[crate::video_data::middle_index(clip.len())],
    })
}

/// `{video_id}_{frame}_{class}.png`.
pub fn overlay_file_name(cam: &CamMap) -> String {
    format!("{}_{}_{}.png", cam.video_id, cam.frame_index, cam.class_id)
}

/// Blue (cold) to red (hot) colour ramp.
fn heat_color(v: f64) -> [f64; 3] {
    let v = v.clamp(0.0, 1.0);
    [v, 1.0 - (2.0 * v - 1.0).abs(), 1.0 - v]
}

/// Alpha-blend `cam` over an `(H, W, 3)` frame with values in `[0, 1]`.
pub fn blend_overlay(frame: ArrayView3<f64>, cam: &CamMap, alpha: f64) -> Result<RgbImage> {
    let (h, w, _) = frame.dim();
    if cam.heat.dim() != (h, w) {
        return Err(Error::Shape(format!(
            "heatmap is {:?} but the frame is {h}x{w}",
            cam.heat.dim()
        )));
    }
    let mut img = RgbImage::new(w as u32, h as u32);
    for i in 0..h {
        for j in 0..w {
            let c = heat_color(cam.heat[[i, j]]);
            let px: [u8; 3] = std::array::from_fn(|k| {
                let v = (1.0 - alpha) * frame[[i, j, k]] + alpha * c[k];
                (v.clamp(0.0, 1.0) * 255.0).round() as u8
            });
            img.put_pixel(j as u32, i as u32, Rgb(px));
        }
    }
    Ok(img)
}

/// Write the overlay into `dir` and return its path.
pub fn render_overlay(frame: ArrayView3<f64>, cam: &CamMap, alpha: f64, dir: &Path) -> Result<std::path::PathBuf> {
    let img = blend_overlay(frame, cam, alpha)?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    let path = dir.join(overlay_file_name(cam));
    img.save(&path).map_err(|e| Error::Image {
        path: path.clone(),
        message: e.to_string(),
    })?;
    Ok(path)
}

/// Mean heat over actor pixels (`mask > 0`) and over background pixels.
pub fn actor_background_heat(heat: &Array2<f64>, mask: &Array2<u8>) -> Result<(f64, f64)> {
    if heat.dim() != mask.dim() {
        return Err(Error::Shape(format!("heat {:?} vs mask {:?}", heat.dim(), mask.dim())));
    }
    let (mut a, mut na, mut b, mut nb) = (0.0, 0usize, 0.0, 0usize);
    for (&v, &m) in heat.iter().zip(mask.iter()) {
        if m > 0 {
            a += v;
            na += 1;
        } else {
            b += v;
            nb += 1;
        }
    }
    if na == 0 || nb == 0 {
        return Err(Error::Shape("mask must contain both actor and background pixels".into()));
    }
    Ok((a / na as f64, b / nb as f64))
}
