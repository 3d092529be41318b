//! Binary container for parameters and training state.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic  b"MTVSSLCK"
//! u32    format version
//! u64    metadata length, then that many bytes of UTF-8 JSON
//! u32    array count
//! per array:
//!   u32 name length, name bytes
//!   u8  dtype (0 = f32, 1 = f64)
//!   u32 rank, then rank x u64 dims
//!   prod(dims) values
//! ```
//!
//! Model checkpoints store f32 values. Training-state files reuse the same
//! container with f64 values so a resumed run is exact.

use std::fs::{self, File};
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use super::params::ParamSet;
use super::{Model, ModelConfig, Variant};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"MTVSSLCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    fn code(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
        }
    }

    fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

/// Metadata manifest stored at the head of a model checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub variant: Variant,
    pub step: u64,
    pub seed: u64,
    pub config_hash: String,
    pub representation_dim: usize,
    pub model: ModelConfig,
}

/// Write `arrays` and `meta` to `path` via a temporary file and rename.
pub fn write_container<'a>(
    path: &Path,
    meta: &serde_json::Value,
    arrays: impl IntoIterator<Item = (&'a str, &'a ArrayD<f64>)>,
    dtype: Dtype,
) -> Result<()> {
    let tmp = path.with_extension("partial");
    let file = File::create(&tmp).map_err(|e| Error::io(format!("creating {}", tmp.display()), e))?;
    let mut w = BufWriter::new(file);
    let arrays: Vec<_> = arrays.into_iter().collect();
    let ctx = || format!("writing {}", path.display());
    let result = (|| -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_u32::<LittleEndian>(FORMAT_VERSION)?;
        let json = serde_json::to_vec(meta).map_err(std::io::Error::other)?;
        w.write_u64::<LittleEndian>(json.len() as u64)?;
        w.write_all(&json)?;
        w.write_u32::<LittleEndian>(arrays.len() as u32)?;
        for (name, array) in &arrays {
            w.write_u32::<LittleEndian>(name.len() as u32)?;
            w.write_all(name.as_bytes())?;
            w.write_u8(dtype.code())?;
            w.write_u32::<LittleEndian>(array.ndim() as u32)?;
            for &d in array.shape() {
                w.write_u64::<LittleEndian>(d as u64)?;
            }
            for &v in array.iter() {
                match dtype {
                    Dtype::F32 => w.write_f32::<LittleEndian>(v as f32)?,
                    Dtype::F64 => w.write_f64::<LittleEndian>(v)?,
                }
            }
        }
        w.flush()?;
        w.get_ref().sync_all()
    })();
    result.map_err(|e| Error::io(ctx(), e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(ctx(), e))
}

/// Byte reader that reports the offset of any failure.
struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::CorruptCheckpoint {
                offset: self.pos as u64,
                message: format!(
                    "truncated while reading {what}: need {n} bytes, {} left",
                    self.bytes.len() - self.pos
                ),
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(self.take(4, what)?.read_u32::<LittleEndian>().expect("4 bytes"))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(self.take(8, what)?.read_u64::<LittleEndian>().expect("8 bytes"))
    }

    fn corrupt(&self, offset: usize, message: impl Into<String>) -> Error {
        Error::CorruptCheckpoint {
            offset: offset as u64,
            message: message.into(),
        }
    }
}

/// Parsed container: metadata plus named arrays in file order.
#[derive(Debug, Clone)]
pub struct Container {
    pub meta: serde_json::Value,
    pub dtype: Option<Dtype>,
    pub arrays: Vec<(String, ArrayD<f64>)>,
}

pub fn read_container(path: &Path) -> Result<Container> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    parse_container(&bytes)
}

pub fn parse_container(bytes: &[u8]) -> Result<Container> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(8, "magic")? != MAGIC {
        return Err(c.corrupt(0, "bad magic; not a checkpoint file"));
    }
    let at = c.pos;
    let version = c.u32("format version")?;
    if version != FORMAT_VERSION {
        return Err(c.corrupt(at, format!("unsupported format version {version}")));
    }
    let len = c.u64("metadata length")? as usize;
    let at = c.pos;
    let meta: serde_json::Value = serde_json::from_slice(c.take(len, "metadata")?)
        .map_err(|e| c.corrupt(at, format!("metadata is not valid JSON: {e}")))?;
    let count = c.u32("array count")?;
    let mut arrays = Vec::with_capacity(count.min(4096) as usize);
    let mut dtype = None;
    for _ in 0..count {
        let n = c.u32("name length")? as usize;
        let at = c.pos;
        let name = std::str::from_utf8(c.take(n, "name")?)
            .map_err(|_| c.corrupt(at, "array name is not UTF-8"))?
            .to_string();
        let at = c.pos;
        let dt = match c.u8("dtype")? {
            0 => Dtype::F32,
            1 => Dtype::F64,
            other => return Err(c.corrupt(at, format!("unknown dtype code {other} for `{name}`"))),
        };
        dtype = Some(dt);
        let rank = c.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(c.u64("dimension")? as usize);
        }
        let at = c.pos;
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| c.corrupt(at, format!("shape {shape:?} of `{name}` overflows")))?;
        let raw = c.take(numel.saturating_mul(dt.width()), &format!("values of `{name}`"))?;
        let values: Vec<f64> = match dt {
            Dtype::F32 => raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64).collect(),
            Dtype::F64 => raw.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect(),
        };
        let array = ArrayD::from_shape_vec(IxDyn(&shape), values).expect("length matches shape");
        arrays.push((name, array));
    }
    if c.pos != bytes.len() {
        return Err(c.corrupt(c.pos, format!("{} trailing bytes", bytes.len() - c.pos)));
    }
    Ok(Container { meta, dtype, arrays })
}

impl Model {
    pub fn save(&self, path: &Path, step: u64, seed: u64, config_hash: &str) -> Result<CheckpointMeta> {
        let meta = CheckpointMeta {
            format_version: FORMAT_VERSION,
            variant: self.variant,
            step,
            seed,
            config_hash: config_hash.to_string(),
            representation_dim: self.representation_dim(),
            model: self.config.clone(),
        };
        write_container(path, &serde_json::to_value(&meta)?, self.params.iter(), Dtype::F32)?;
        Ok(meta)
    }

    /// Load a checkpoint, rebuilding the architecture from its metadata and
    /// requiring the stored names and shapes to match it exactly.
    pub fn load(path: &Path) -> Result<(Self, CheckpointMeta)> {
        let container = read_container(path)?;
        let meta: CheckpointMeta = serde_json::from_value(container.meta)
            .map_err(|e| Error::CorruptCheckpoint { offset: 12, message: format!("bad metadata: {e}") })?;
        let mut model = Model::build(&meta.model, meta.variant, 0)?;
        let loaded: ParamSet = container.arrays.into_iter().collect();
        model.params.check_same_layout(&loaded)?;
        model.params = loaded;
        Ok((model, meta))
    }

    /// Load a checkpoint that must be of `variant`.
    pub fn load_variant(path: &Path, variant: Variant) -> Result<(Self, CheckpointMeta)> {
        let (model, meta) = Self::load(path)?;
        if meta.variant != variant {
            return Err(Error::Config(format!(
                "checkpoint {} holds variant {}, expected {variant}",
                path.display(),
                meta.variant
            )));
        }
        Ok((model, meta))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig {
            clip_length: 4,
            input_height: 16,
            input_width: 16,
            conv_channels: vec![4, 8],
            hidden_dim: 8,
            embed_dim: 8,
            proj_dim: 8,
            decoder_channels: 4,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn round_trip_is_f32_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let model = Model::build(&small(), Variant::Full, 3).unwrap();
        model.save(&path, 7, 3, "abc").unwrap();
        let (loaded, meta) = Model::load(&path).unwrap();
        assert_eq!((meta.step, meta.seed, meta.variant), (7, 3, Variant::Full));
        assert_eq!(meta.representation_dim, 16);
        for (name, v) in model.params.iter() {
            let w = loaded.params.get(name);
            assert!(v.iter().zip(w.iter()).all(|(a, b)| (*a as f32) as f64 == *b));
        }
        assert!(Model::load_variant(&path, Variant::NoKd).is_err());
    }

    #[test]
    fn f64_container_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.bin");
        let a = ArrayD::from_shape_vec(IxDyn(&[3]), vec![0.1, 1e-300, -7.25]).unwrap();
        write_container(&path, &serde_json::json!({"k": 1}), [("a", &a)], Dtype::F64).unwrap();
        let c = read_container(&path).unwrap();
        assert_eq!(c.arrays[0].1, a);
        assert_eq!(c.meta["k"], 1);
        assert_eq!(c.dtype, Some(Dtype::F64));
    }

    #[test]
    fn truncation_reports_offset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        Model::build(&small(), Variant::NoKd, 3).unwrap().save(&path, 1, 3, "h").unwrap();
        let bytes = fs::read(&path).unwrap();
        for cut in [0, 5, 20, bytes.len() / 2, bytes.len() - 1] {
            match parse_container(&bytes[..cut]) {
                Err(Error::CorruptCheckpoint { offset, .. }) => assert!(offset as usize <= cut),
                other => panic!("cut {cut}: expected corrupt error, got {other:?}"),
            }
        }
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(parse_container(&extra).is_err());
    }

    #[test]
    fn name_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let model = Model::build(&small(), Variant::Full, 3).unwrap();
        let meta = serde_json::to_value(CheckpointMeta {
            format_version: FORMAT_VERSION,
            variant: Variant::Full,
            step: 0,
            seed: 3,
            config_hash: String::new(),
            representation_dim: 16,
            model: small(),
        })
        .unwrap();
        let partial = model.params.subset(&["f_l"]);
        write_container(&path, &meta, partial.iter(), Dtype::F32).unwrap();
        assert!(matches!(Model::load(&path), Err(Error::Shape(_))));
    }
}
