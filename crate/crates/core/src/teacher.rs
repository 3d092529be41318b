//! Human-parsing teacher abstraction. Three interchangeable teachers produce
//! per-pixel class distributions for a frame, already aligned with the
//! augmented crop of the clip the frame came from:
//!
//! * oracle: softened one-hot of the synthetic ground truth,
//! * file: maps precomputed offline by an external parser,
//! * stub: a fixed random per-pixel classifier, for pipeline tests.

use std::collections::HashMap;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array2, Array3, ArrayView2, ArrayView3, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::resample::{bilinear_at, nearest_at};
use crate::rng::rng_for;
use crate::video_data::{CropGeometry, Frame, SourceVideo};

/// Tolerance on per-location class sums.
pub const NORMALIZATION_TOL: f64 = 1e-5;

/// Per-pixel class probabilities laid out `(H, W, C)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationProbMap {
    probs: Array3<f64>,
}

impl SegmentationProbMap {
    /// Validate non-negativity and per-location normalisation.
    pub fn new(probs: Array3<f64>) -> Result<Self> {
        Self::check(&probs, NORMALIZATION_TOL)?;
        Ok(Self { probs })
    }

    pub(crate) fn check(probs: &Array3<f64>, tol: f64) -> Result<()> {
        let (h, w, c) = probs.dim();
        if h == 0 || w == 0 || c < 2 {
            return Err(Error::Shape(format!("probability map must be non-empty with C >= 2, got ({h}, {w}, {c})")));
        }
        for ((i, j), lane) in probs.lanes(Axis(2)).into_iter().enumerate().map(|(k, l)| ((k / w, k % w), l)) {
            if lane.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
                return Err(Error::NotNormalized(format!("negative or non-finite probability at ({i}, {j})")));
            }
            let sum: f64 = lane.sum();
            if (sum - 1.0).abs() > tol {
                return Err(Error::NotNormalized(format!("class sum {sum} at ({i}, {j})")));
            }
        }
        Ok(())
    }

    /// Softmax over the class axis of channel-first logits `(C, H, W)`.
    pub fn from_logits(logits: ArrayView3<f64>) -> Self {
        let (c, h, w) = logits.dim();
        let mut probs = Array3::zeros((h, w, c));
        for i in 0..h {
            for j in 0..w {
                let max = (0..c).map(|k| logits[[k, i, j]]).fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for k in 0..c {
                    let e = (logits[[k, i, j]] - max).exp();
                    probs[[i, j, k]] = e;
                    sum += e;
                }
                for k in 0..c {
                    probs[[i, j, k]] /= sum;
                }
            }
        }
        Self { probs }
    }

    pub fn uniform(height: usize, width: usize, classes: usize) -> Self {
        Self {
            probs: Array3::from_elem((height, width, classes), 1.0 / classes as f64),
        }
    }

    /// Softened one-hot encoding: `1 - delta` on the labelled class, `delta / (C - 1)` elsewhere.
    pub fn from_class_map(classes: ArrayView2<u8>, num_classes: usize, delta: f64) -> Result<Self> {
        let (h, w) = classes.dim();
        let off = delta / (num_classes - 1) as f64;
        let mut probs = Array3::from_elem((h, w, num_classes), off);
        for ((i, j), &c) in classes.indexed_iter() {
            if c as usize >= num_classes {
                return Err(Error::Teacher(format!("class index {c} at ({i}, {j}) exceeds C = {num_classes}")));
            }
            probs[[i, j, c as usize]] = 1.0 - delta;
        }
        Ok(Self { probs })
    }

    #[cfg(test)]
    pub(crate) fn from_probs_unchecked(probs: Array3<f64>) -> Self {
        Self { probs }
    }

    pub fn probs(&self) -> &Array3<f64> {
        &self.probs
    }

    pub fn into_probs(self) -> Array3<f64> {
        self.probs
    }

    pub fn height(&self) -> usize {
        self.probs.dim().0
    }

    pub fn width(&self) -> usize {
        self.probs.dim().1
    }

    pub fn num_classes(&self) -> usize {
        self.probs.dim().2
    }

    /// Number of spatial locations `H * W`.
    pub fn locations(&self) -> usize {
        self.height() * self.width()
    }

    /// Most probable class per location; ties resolve to the smallest index.
    pub fn argmax(&self) -> Array2<u8> {
        let (h, w, c) = self.probs.dim();
        Array2::from_shape_fn((h, w), |(i, j)| {
            let mut best = 0;
            for k in 1..c {
                if self.probs[[i, j, k]] > self.probs[[i, j, best]] {
                    best = k;
                }
            }
            best as u8
        })
    }
}

/// Probability assigned to non-target classes when one-hot logits scaled by
/// `1 / temperature` go through a softmax.
pub fn delta_from_temperature(temperature: f64, num_classes: usize) -> f64 {
    if temperature <= 0.0 {
        return 0.0;
    }
    let others = (num_classes - 1) as f64;
    others / ((1.0 / temperature).exp() + others)
}

/// Resample a source-resolution class map into the crop described by
/// `geometry`, on an `out_h x out_w` grid, using nearest neighbour.
pub fn align_class_map(
    map: ArrayView2<u8>,
    geometry: Option<&CropGeometry>,
    out_h: usize,
    out_w: usize,
) -> Array2<u8> {
    let (h, w) = map.dim();
    let full = CropGeometry::full(h, w);
    let g = geometry.unwrap_or(&full);
    Array2::from_shape_fn((out_h, out_w), |(i, j)| {
        let (y, x) = g.source_coords(i, j, out_h, out_w);
        nearest_at(map, y, x)
    })
}

/// Bilinear resample of a probability map into the crop described by
/// `geometry` (in the coordinates of a `frame_h x frame_w` frame), then
/// renormalise each location.
pub fn align_prob_map(
    probs: ArrayView3<f64>,
    frame_h: usize,
    frame_w: usize,
    geometry: Option<&CropGeometry>,
    out_h: usize,
    out_w: usize,
) -> SegmentationProbMap {
    let (mh, mw, c) = probs.dim();
    let full = CropGeometry::full(frame_h, frame_w);
    let g = geometry.unwrap_or(&full);
    let (sy, sx) = (mh as f64 / frame_h as f64, mw as f64 / frame_w as f64);
    let mut out = Array3::zeros((out_h, out_w, c));
    let mut px = vec![0.0; c];
    for i in 0..out_h {
        for j in 0..out_w {
            let (y, x) = g.source_coords(i, j, out_h, out_w);
            bilinear_at(probs, (y + 0.5) * sy - 0.5, (x + 0.5) * sx - 0.5, &mut px);
            let sum: f64 = px.iter().sum();
            for k in 0..c {
                out[[i, j, k]] = px[k] / sum;
            }
        }
    }
    SegmentationProbMap { probs: out }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TeacherKind {
    Oracle,
    File,
    Stub,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TeacherSpec {
    pub kind: TeacherKind,
    pub num_classes: usize,
    /// Output resolution; fixed to the parsing decoder's output resolution.
    pub out_height: usize,
    pub out_width: usize,
    /// Oracle softening as a softmax temperature on one-hot logits. When
    /// set, it overrides `oracle_delta` via [`delta_from_temperature`].
    pub softening_temperature: Option<f64>,
    pub oracle_delta: f64,
    /// Map manifest for the file-backed teacher.
    pub map_manifest: Option<PathBuf>,
    pub stub_seed: u64,
}

impl Default for TeacherSpec {
    fn default() -> Self {
        Self {
            kind: TeacherKind::Oracle,
            num_classes: 4,
            out_height: 8,
            out_width: 8,
            softening_temperature: None,
            oracle_delta: 0.1,
            map_manifest: None,
            stub_seed: 17,
        }
    }
}

impl TeacherSpec {
    pub fn delta(&self) -> f64 {
        match self.softening_temperature {
            Some(t) => delta_from_temperature(t, self.num_classes),
            None => self.oracle_delta,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config("teacher.num_classes must be at least 2".into()));
        }
        if self.out_height == 0 || self.out_width == 0 {
            return Err(Error::Config("teacher output resolution must be positive".into()));
        }
        let delta = self.delta();
        if !(0.0..1.0).contains(&delta) {
            return Err(Error::Config(format!("oracle delta {delta} must lie in [0, 1)")));
        }
        if self.kind == TeacherKind::File && self.map_manifest.is_none() {
            return Err(Error::Config("file teacher requires teacher.map_manifest".into()));
        }
        Ok(())
    }
}

/// What a teacher may need beyond the pixels: the source video's ground truth
/// for the frame (oracle only).
#[derive(Debug, Clone, Copy)]
pub struct TeacherContext<'a> {
    pub parsing: Option<ArrayView2<'a, u8>>,
}

impl<'a> TeacherContext<'a> {
    pub fn none() -> Self {
        Self { parsing: None }
    }

    /// Ground truth of `frame` taken from `video`, when the video carries any.
    pub fn for_frame(video: &'a SourceVideo, frame: &Frame) -> Self {
        Self {
            parsing: video
                .parsing_gt
                .as_ref()
                .map(|gt| gt.index_axis(Axis(0), frame.source_index)),
        }
    }
}

pub trait Teacher: Send + Sync {
    /// Class distribution for `frame`, aligned with `frame.geometry`, at the
    /// teacher's output resolution.
    fn parse(&self, frame: &Frame, ctx: &TeacherContext<'_>) -> Result<SegmentationProbMap>;

    fn num_classes(&self) -> usize;

    fn output_size(&self) -> (usize, usize);
}

#[derive(Debug, Clone)]
pub struct OracleTeacher {
    num_classes: usize,
    out_h: usize,
    out_w: usize,
    delta: f64,
}

impl OracleTeacher {
    pub fn new(num_classes: usize, out_h: usize, out_w: usize, delta: f64) -> Self {
        Self {
            num_classes,
            out_h,
            out_w,
            delta,
        }
    }
}

impl Teacher for OracleTeacher {
    fn parse(&self, frame: &Frame, ctx: &TeacherContext<'_>) -> Result<SegmentationProbMap> {
        let gt = ctx.parsing.ok_or_else(|| {
            Error::Teacher(format!(
                "oracle teacher needs ground-truth parsing for {} frame {}",
                frame.clip_source, frame.source_index
            ))
        })?;
        let (fh, fw, _) = frame.pixels.dim();
        if gt.dim() != (fh, fw) {
            return Err(Error::Teacher(format!(
                "ground truth is {:?} but frame is {fh}x{fw}",
                gt.dim()
            )));
        }
        let aligned = align_class_map(gt, frame.geometry.as_ref(), self.out_h, self.out_w);
        SegmentationProbMap::from_class_map(aligned.view(), self.num_classes, self.delta)
    }

    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn output_size(&self) -> (usize, usize) {
        (self.out_h, self.out_w)
    }
}

/// Fixed random linear per-pixel classifier on RGB followed by a softmax.
#[derive(Debug, Clone)]
pub struct StubTeacher {
    weights: Array2<f64>,
    bias: Vec<f64>,
    out_h: usize,
    out_w: usize,
}

impl StubTeacher {
    pub fn new(num_classes: usize, out_h: usize, out_w: usize, seed: u64) -> Self {
        let mut rng = rng_for(seed, &[0x57AB]);
        let weights = Array2::from_shape_fn((num_classes, 3), |_| rng.gen_range(-3.0..3.0));
        let bias = (0..num_classes).map(|_| rng.gen_range(-0.5..0.5)).collect();
        Self {
            weights,
            bias,
            out_h,
            out_w,
        }
    }
}

impl Teacher for StubTeacher {
    fn parse(&self, frame: &Frame, _ctx: &TeacherContext<'_>) -> Result<SegmentationProbMap> {
        let (h, w, _) = frame.pixels.dim();
        let c = self.bias.len();
        let logits = Array3::from_shape_fn((c, h, w), |(k, i, j)| {
            self.bias[k] + (0..3).map(|ch| self.weights[[k, ch]] * frame.pixels[[i, j, ch]]).sum::<f64>()
        });
        let full = SegmentationProbMap::from_logits(logits.view());
        Ok(align_prob_map(full.probs.view(), h, w, frame.geometry.as_ref(), self.out_h, self.out_w))
    }

    fn num_classes(&self) -> usize {
        self.bias.len()
    }

    fn output_size(&self) -> (usize, usize) {
        (self.out_h, self.out_w)
    }
}

/// Maps precomputed offline, indexed by `(video_id, frame_index)`. Files are
/// read on every call, so the teacher holds no mutable state.
#[derive(Debug, Clone)]
pub struct FileTeacher {
    entries: HashMap<(String, usize), PathBuf>,
    num_classes: usize,
    out_h: usize,
    out_w: usize,
    delta: f64,
}

const MAP_MANIFEST_HEADER: &str = "#classes";

impl FileTeacher {
    /// Read a map manifest: a `#classes<TAB>C` header, then
    /// `video_id<TAB>frame_index<TAB>file` lines with files relative to the manifest.
    pub fn open(manifest: &Path, out_h: usize, out_w: usize, delta: f64) -> Result<Self> {
        let text = fs::read_to_string(manifest)
            .map_err(|e| Error::io(format!("reading map manifest {}", manifest.display()), e))?;
        let base = manifest.parent().unwrap_or(Path::new("."));
        let mut num_classes = None;
        let mut entries = HashMap::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            let malformed = |message: String| Error::Manifest {
                path: manifest.to_path_buf(),
                line: lineno + 1,
                message,
            };
            if fields[0] == MAP_MANIFEST_HEADER {
                let c: usize = fields
                    .get(1)
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| malformed("bad class count".into()))?;
                num_classes = Some(c);
                continue;
            }
            if fields.len() != 3 {
                return Err(malformed(format!("expected 3 fields, got {}", fields.len())));
            }
            let index: usize = fields[1]
                .parse()
                .map_err(|_| malformed(format!("bad frame index `{}`", fields[1])))?;
            entries.insert((fields[0].to_string(), index), base.join(fields[2]));
        }
        let num_classes = num_classes.ok_or_else(|| Error::Manifest {
            path: manifest.to_path_buf(),
            line: 1,
            message: format!("missing `{MAP_MANIFEST_HEADER}` header"),
        })?;
        if num_classes < 2 {
            return Err(Error::Teacher(format!("map manifest declares C = {num_classes}")));
        }
        Ok(Self {
            entries,
            num_classes,
            out_h,
            out_w,
            delta,
        })
    }
}

impl Teacher for FileTeacher {
    fn parse(&self, frame: &Frame, _ctx: &TeacherContext<'_>) -> Result<SegmentationProbMap> {
        let key = (frame.clip_source.clone(), frame.source_index);
        let path = self.entries.get(&key).ok_or_else(|| {
            Error::Teacher(format!("no precomputed map for {} frame {}", key.0, key.1))
        })?;
        let (fh, fw, _) = frame.pixels.dim();
        let is_image = path
            .extension()
            .is_some_and(|e| e.eq_ignore_ascii_case("png"));
        let aligned = if is_image {
            let img = image::open(path)
                .map_err(|e| Error::Teacher(format!("cannot read {}: {e}", path.display())))?
                .to_luma8();
            let (w, h) = img.dimensions();
            let classes = Array2::from_shape_fn((h as usize, w as usize), |(i, j)| img.get_pixel(j as u32, i as u32)[0]);
            let geometry = frame.geometry.map(|g| rescale_geometry(&g, fh, fw, h as usize, w as usize));
            let map = align_class_map(classes.view(), geometry.as_ref(), self.out_h, self.out_w);
            SegmentationProbMap::from_class_map(map.view(), self.num_classes, self.delta)?
        } else {
            let map = read_pmap(path)?;
            if map.num_classes() != self.num_classes {
                return Err(Error::Teacher(format!(
                    "{} has {} classes, manifest declares {}",
                    path.display(),
                    map.num_classes(),
                    self.num_classes
                )));
            }
            align_prob_map(map.probs.view(), fh, fw, frame.geometry.as_ref(), self.out_h, self.out_w)
        };
        if (aligned.height(), aligned.width()) != (self.out_h, self.out_w) {
            return Err(Error::Teacher("resolution mismatch after resampling".into()));
        }
        Ok(aligned)
    }

    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn output_size(&self) -> (usize, usize) {
        (self.out_h, self.out_w)
    }
}

// Geometry given for a `fh x fw` frame, re-expressed for a `mh x mw` map of the same frame.
fn rescale_geometry(g: &CropGeometry, fh: usize, fw: usize, mh: usize, mw: usize) -> CropGeometry {
    let (sy, sx) = (mh as f64 / fh as f64, mw as f64 / fw as f64);
    CropGeometry {
        y0: g.y0 * sy,
        x0: g.x0 * sx,
        height: g.height * sy,
        width: g.width * sx,
        flip: g.flip,
    }
}

pub fn build_teacher(spec: &TeacherSpec) -> Result<Box<dyn Teacher>> {
    spec.validate()?;
    Ok(match spec.kind {
        TeacherKind::Oracle => Box::new(OracleTeacher::new(spec.num_classes, spec.out_height, spec.out_width, spec.delta())),
        TeacherKind::Stub => Box::new(StubTeacher::new(spec.num_classes, spec.out_height, spec.out_width, spec.stub_seed)),
        TeacherKind::File => {
            let manifest = spec.map_manifest.as_ref().expect("validated");
            let teacher = FileTeacher::open(manifest, spec.out_height, spec.out_width, spec.delta())?;
            if teacher.num_classes != spec.num_classes {
                return Err(Error::Config(format!(
                    "map manifest declares C = {} but teacher.num_classes = {}",
                    teacher.num_classes, spec.num_classes
                )));
            }
            Box::new(teacher)
        }
    })
}

const PMAP_MAGIC: &[u8; 4] = b"PMAP";
const PMAP_VERSION: u8 = 1;

/// Write a map as `PMAP`, version byte, `H, W, C` (u32 LE), then `H*W*C` f32 LE in `(i, j, c)` order.
pub fn write_pmap(path: &Path, map: &SegmentationProbMap) -> Result<()> {
    let (h, w, c) = map.probs.dim();
    let mut buf = Vec::with_capacity(17 + 4 * h * w * c);
    buf.extend_from_slice(PMAP_MAGIC);
    buf.push(PMAP_VERSION);
    for d in [h, w, c] {
        buf.write_u32::<LittleEndian>(d as u32).expect("vec write");
    }
    for &p in map.probs.iter() {
        buf.write_f32::<LittleEndian>(p as f32).expect("vec write");
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
    file.write_all(&buf)
        .map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// Read a `PMAP` file. Values are renormalised after the f32 round trip.
pub fn read_pmap(path: &Path) -> Result<SegmentationProbMap> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let corrupt = |m: &str| Error::Teacher(format!("corrupt map file {}: {m}", path.display()));
    if bytes.len() < 17 || &bytes[..4] != PMAP_MAGIC {
        return Err(corrupt("bad magic"));
    }
    if bytes[4] != PMAP_VERSION {
        return Err(corrupt(&format!("unsupported version {}", bytes[4])));
    }
    let mut cursor = &bytes[5..];
    let mut dim = || cursor.read_u32::<LittleEndian>().map(|v| v as usize);
    let (h, w, c) = (dim().unwrap(), dim().unwrap(), dim().unwrap());
    let expected = 17 + 4 * h * w * c;
    if bytes.len() != expected {
        return Err(corrupt(&format!("expected {expected} bytes, found {}", bytes.len())));
    }
    let mut cursor = &bytes[17..];
    let mut probs = Array3::zeros((h, w, c));
    for p in probs.iter_mut() {
        *p = cursor.read_f32::<LittleEndian>().expect("length checked") as f64;
    }
    for mut lane in probs.lanes_mut(Axis(2)) {
        let s = lane.sum();
        if s > 0.0 {
            lane.mapv_inplace(|v| v / s);
        }
    }
    SegmentationProbMap::check(&probs, NORMALIZATION_TOL).map_err(|e| corrupt(&e.to_string()))?;
    Ok(SegmentationProbMap { probs })
}

/// Run `teacher` over the listed frames of every video (all frames when
/// `frames` is `None`), writing one PMAP file per frame at the frame's own
/// resolution plus a map manifest readable by [`FileTeacher`].
pub fn export_maps(
    videos: &[SourceVideo],
    teacher: &dyn Teacher,
    out_dir: &Path,
    frames: Option<&[usize]>,
) -> Result<PathBuf> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(format!("creating {}", out_dir.display()), e))?;
    let mut manifest = format!("{MAP_MANIFEST_HEADER}\t{}\n", teacher.num_classes());
    for video in videos {
        let indices: Vec<usize> = match frames {
            Some(list) => list.to_vec(),
            None => (0..video.frame_count()).collect(),
        };
        for k in indices {
            if k >= video.frame_count() {
                return Err(Error::Dataset {
                    video_id: video.video_id.clone(),
                    message: format!("frame {k} out of range"),
                });
            }
            let frame = Frame {
                pixels: video.frames.index_axis(Axis(0), k).to_owned(),
                clip_source: video.video_id.clone(),
                source_index: k,
                geometry: None,
            };
            let map = teacher.parse(&frame, &TeacherContext::for_frame(video, &frame)).map_err(|e| Error::Dataset {
                video_id: video.video_id.clone(),
                message: format!("teacher failed on frame {k}: {e}"),
            })?;
            let name = format!("{}_{k:05}.pmap", video.video_id);
            write_pmap(&out_dir.join(&name), &map).map_err(|e| Error::Dataset {
                video_id: video.video_id.clone(),
                message: e.to_string(),
            })?;
            manifest.push_str(&format!("{}\t{k}\t{name}\n", video.video_id));
        }
    }
    let path = out_dir.join("maps.tsv");
    fs::write(&path, manifest).map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
    Ok(path)
}
