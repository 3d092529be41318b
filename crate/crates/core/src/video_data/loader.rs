//! Frame-directory datasets described by a tab-separated manifest:
//! `video_id<TAB>label<TAB>frame_glob[<TAB>parsing_glob]`, globs relative to the root.

use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, RgbImage};
use ndarray::{Array3, Array4, Axis};

use super::SourceVideo;
use crate::error::{Error, Result};

fn numeric_key(path: &Path) -> Option<u64> {
    let stem = path.file_stem()?.to_string_lossy();
    let digits: String = stem
        .chars()
        .rev()
        .skip_while(|c| !c.is_ascii_digit())
        .take_while(|c| c.is_ascii_digit())
        .collect::<Vec<_>>()
        .into_iter()
        .rev()
        .collect();
    digits.parse().ok()
}

fn expand(root: &Path, pattern: &str, video_id: &str) -> Result<Vec<PathBuf>> {
    let full = root.join(pattern);
    let dataset_err = |message: String| Error::Dataset {
        video_id: video_id.to_string(),
        message,
    };
    let entries = glob::glob(&full.to_string_lossy()).map_err(|e| dataset_err(format!("bad glob `{pattern}`: {e}")))?;
    let mut keyed = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| dataset_err(e.to_string()))?;
        let key = numeric_key(&path)
            .ok_or_else(|| dataset_err(format!("file {} has no numeric frame index", path.display())))?;
        keyed.push((key, path));
    }
    if keyed.is_empty() {
        return Err(dataset_err(format!("no frames match `{pattern}`")));
    }
    keyed.sort();
    Ok(keyed.into_iter().map(|(_, p)| p).collect())
}

fn read_rgb(path: &Path, video_id: &str) -> Result<RgbImage> {
    image::open(path)
        .map(|img| img.to_rgb8())
        .map_err(|e| Error::Dataset {
            video_id: video_id.to_string(),
            message: format!("cannot read {}: {e}", path.display()),
        })
}

/// Load every video listed in `manifest` (resolved relative to `root` when not absolute).
pub fn load_frame_directory(root: impl AsRef<Path>, manifest: impl AsRef<Path>) -> Result<Vec<SourceVideo>> {
    let root = root.as_ref();
    let manifest_path = if manifest.as_ref().is_absolute() {
        manifest.as_ref().to_path_buf()
    } else {
        root.join(manifest.as_ref())
    };
    let text = fs::read_to_string(&manifest_path)
        .map_err(|e| Error::io(format!("reading manifest {}", manifest_path.display()), e))?;

    let mut videos = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let malformed = |message: String| Error::Manifest {
            path: manifest_path.clone(),
            line: lineno + 1,
            message,
        };
        if !(3..=4).contains(&fields.len()) {
            return Err(malformed(format!("expected 3 or 4 tab-separated fields, got {}", fields.len())));
        }
        let video_id = fields[0];
        if video_id.is_empty() {
            return Err(malformed("empty video_id".into()));
        }
        let label: usize = fields[1]
            .parse()
            .map_err(|_| malformed(format!("video {video_id}: label `{}` is not a non-negative integer", fields[1])))?;

        let frame_paths = expand(root, fields[2], video_id)?;
        let first = read_rgb(&frame_paths[0], video_id)?;
        let (w, h) = first.dimensions();
        let (h, w) = (h as usize, w as usize);
        let mut frames = Array4::zeros((frame_paths.len(), h, w, 3));
        for (k, path) in frame_paths.iter().enumerate() {
            let img = if k == 0 { first.clone() } else { read_rgb(path, video_id)? };
            if img.dimensions() != (w as u32, h as u32) {
                return Err(Error::Dataset {
                    video_id: video_id.to_string(),
                    message: format!(
                        "inconsistent resolution: {} is {:?}, expected {w}x{h}",
                        path.display(),
                        img.dimensions()
                    ),
                });
            }
            let mut frame = frames.index_axis_mut(Axis(0), k);
            for (x, y, px) in img.enumerate_pixels() {
                for c in 0..3 {
                    frame[[y as usize, x as usize, c]] = px[c] as f64 / 255.0;
                }
            }
        }

        let parsing = match fields.get(3) {
            Some(pattern) => {
                let maps = expand(root, pattern, video_id)?;
                if maps.len() != frame_paths.len() {
                    return Err(Error::Dataset {
                        video_id: video_id.to_string(),
                        message: format!("{} parsing maps for {} frames", maps.len(), frame_paths.len()),
                    });
                }
                let mut gt = Array3::<u8>::zeros((maps.len(), h, w));
                for (k, path) in maps.iter().enumerate() {
                    let img = image::open(path)
                        .map_err(|e| Error::Dataset {
                            video_id: video_id.to_string(),
                            message: format!("cannot read {}: {e}", path.display()),
                        })?
                        .to_luma8();
                    if img.dimensions() != (w as u32, h as u32) {
                        return Err(Error::Dataset {
                            video_id: video_id.to_string(),
                            message: format!("inconsistent resolution in parsing map {}", path.display()),
                        });
                    }
                    for (x, y, px) in img.enumerate_pixels() {
                        gt[[k, y as usize, x as usize]] = px[0];
                    }
                }
                Some(gt)
            }
            None => None,
        };
        videos.push(SourceVideo::new(frames, parsing, label, video_id)?);
    }
    Ok(videos)
}

/// Write videos as PNG frame folders plus `manifest.tsv` under `root`.
pub fn write_frame_directory(root: impl AsRef<Path>, videos: &[SourceVideo]) -> Result<PathBuf> {
    let root = root.as_ref();
    let mut manifest = String::new();
    for video in videos {
        let dir = root.join(&video.video_id);
        fs::create_dir_all(&dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
        let (f, h, w) = (video.frame_count(), video.height(), video.width());
        for k in 0..f {
            let frame = video.frames.index_axis(Axis(0), k);
            let img = RgbImage::from_fn(w as u32, h as u32, |x, y| {
                let p = |c: usize| (frame[[y as usize, x as usize, c]].clamp(0.0, 1.0) * 255.0).round() as u8;
                image::Rgb([p(0), p(1), p(2)])
            });
            let path = dir.join(format!("frame_{k:05}.png"));
            img.save(&path).map_err(|e| Error::Image {
                path: path.clone(),
                message: e.to_string(),
            })?;
            if let Some(gt) = &video.parsing_gt {
                let map = gt.index_axis(Axis(0), k);
                let img = GrayImage::from_fn(w as u32, h as u32, |x, y| image::Luma([map[[y as usize, x as usize]]]));
                let path = dir.join(format!("parse_{k:05}.png"));
                img.save(&path).map_err(|e| Error::Image {
                    path: path.clone(),
                    message: e.to_string(),
                })?;
            }
        }
        manifest.push_str(&format!("{}\t{}\t{}/frame_*.png", video.video_id, video.action_label, video.video_id));
        if video.parsing_gt.is_some() {
            manifest.push_str(&format!("\t{}/parse_*.png", video.video_id));
        }
        manifest.push('\n');
    }
    let path = root.join("manifest.tsv");
    fs::write(&path, manifest).map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn numeric_keys_sort_naturally() {
        assert_eq!(numeric_key(Path::new("a/frame_10.png")), Some(10));
        assert_eq!(numeric_key(Path::new("a/img2x.png")), Some(2));
        assert_eq!(numeric_key(Path::new("a/none.png")), None);
    }
}
