//! The single JSON configuration document shared by every command.
//!
//! Resolution order: built-in defaults, then the config file, then the
//! `MTVSSL_SEED` environment variable, then `--set key=value` overrides.
//! The merged document is checked against `docs/config.schema.json` before
//! it is deserialised, so unknown keys and wrongly typed values are rejected.

use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::eval::{ProbeConfig, VizConfig};
use crate::model::ModelConfig;
use crate::teacher::{TeacherKind, TeacherSpec};
use crate::trainer::TrainConfig;
use crate::video_data::{generate_corpus, load_frame_directory, AugmentConfig, Corpus, SceneConfig};

pub const SEED_ENV: &str = "MTVSSL_SEED";

/// Published schema of the configuration document.
pub const SCHEMA: &str = include_str!("../../../docs/config.schema.json");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub scene: SceneConfig,
    pub train_per_action: usize,
    pub test_per_action: usize,
    /// Seed of the synthetic corpus, independent of the training seed.
    pub seed: u64,
    /// Frame-directory manifests; when set they replace the synthetic corpus.
    pub train_manifest: Option<PathBuf>,
    pub test_manifest: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            scene: SceneConfig::default(),
            train_per_action: 25,
            test_per_action: 8,
            seed: 1234,
            train_manifest: None,
            test_manifest: None,
        }
    }
}

impl DataConfig {
    pub fn load_corpus(&self) -> Result<Corpus> {
        match (&self.train_manifest, &self.test_manifest) {
            (Some(train), Some(test)) => Ok(Corpus {
                train: load_manifest(train)?,
                test: load_manifest(test)?,
            }),
            (None, None) => generate_corpus(&self.scene, self.train_per_action, self.test_per_action, self.seed),
            _ => Err(Error::Config("data.train_manifest and data.test_manifest must be set together".into())),
        }
    }
}

fn load_manifest(path: &Path) -> Result<Vec<crate::video_data::SourceVideo>> {
    let root = path.parent().unwrap_or(Path::new("."));
    let name = path.file_name().ok_or_else(|| Error::Config(format!("manifest path {} has no file name", path.display())))?;
    load_frame_directory(root, name)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub data: DataConfig,
    pub augment: AugmentConfig,
    pub model: ModelConfig,
    pub teacher: TeacherSpec,
    pub trainer: TrainConfig,
    pub probe: ProbeConfig,
    pub viz: VizConfig,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            data: DataConfig::default(),
            augment: AugmentConfig::default(),
            model: ModelConfig::default(),
            teacher: TeacherSpec::default(),
            trainer: TrainConfig::default(),
            probe: ProbeConfig::default(),
            viz: VizConfig::default(),
        }
    }
}

impl Config {
    pub fn validate(&self) -> Result<()> {
        self.data.scene.validate()?;
        self.augment.validate()?;
        self.model.validate()?;
        self.teacher.validate()?;
        self.trainer.validate()?;
        self.probe.validate()?;
        let m = &self.model;
        if (self.augment.out_height, self.augment.out_width) != (m.input_height, m.input_width) {
            return Err(Error::Config(format!(
                "augment output {}x{} must equal model input {}x{}",
                self.augment.out_height, self.augment.out_width, m.input_height, m.input_width
            )));
        }
        if self.teacher.num_classes != m.num_classes
            || (self.teacher.out_height, self.teacher.out_width) != (m.seg_height, m.seg_width)
        {
            return Err(Error::Config(
                "teacher classes and output size must match the model's parsing decoder".into(),
            ));
        }
        let synthetic = self.data.train_manifest.is_none();
        if synthetic && self.teacher.kind == TeacherKind::Oracle && self.data.scene.num_part_classes != self.teacher.num_classes {
            return Err(Error::Config(format!(
                "oracle teacher with {} classes needs data.scene.num_part_classes = {}",
                self.teacher.num_classes, self.teacher.num_classes
            )));
        }
        Ok(())
    }

    /// Resolve a configuration from an optional file, an optional seed
    /// override and `key=value` overrides, in increasing precedence.
    pub fn resolve(file: Option<&Path>, env_seed: Option<&str>, overrides: &[String]) -> Result<Self> {
        let mut doc = serde_json::to_value(Config::default())?;
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
            let user: Value = serde_json::from_str(&text)
                .map_err(|e| Error::Config(format!("{} is not valid JSON: {e}", path.display())))?;
            merge(&mut doc, &user, "")?;
        }
        if let Some(seed) = env_seed {
            let seed: u64 = seed
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}={seed:?} is not an unsigned integer")))?;
            doc["trainer"]["seed"] = Value::from(seed);
        }
        for pair in overrides {
            apply_override(&mut doc, pair)?;
        }
        Self::from_document(doc)
    }

    /// Validate a complete document against the schema and the semantic rules.
    pub fn from_document(doc: Value) -> Result<Self> {
        check_schema(&doc)?;
        let config: Config = serde_json::from_value(doc).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    /// Resolve using the process environment for the seed override.
    pub fn resolve_with_env(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let env = std::env::var(SEED_ENV).ok();
        Self::resolve(file, env.as_deref(), overrides)
    }

    /// First 16 hex digits of the SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(&serde_json::to_value(self).expect("config serialises"))
            .expect("config serialises");
        let digest = Sha256::digest(canonical.as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn to_pretty_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }
}

fn merge(base: &mut Value, user: &Value, path: &str) -> Result<()> {
    match (base, user) {
        (Value::Object(b), Value::Object(u)) => {
            for (k, v) in u {
                let key = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                let slot = b.get_mut(k).ok_or_else(|| Error::Config(format!("unknown config key `{key}`")))?;
                if slot.is_object() && v.is_object() {
                    merge(slot, v, &key)?;
                } else {
                    *slot = v.clone();
                }
            }
            Ok(())
        }
        (b, u) => {
            *b = u.clone();
            Ok(())
        }
    }
}

/// Apply one `dotted.key=value` override. The value is parsed as JSON when
/// possible and taken as a string otherwise. Unknown keys are an error.
pub fn apply_override(doc: &mut Value, pair: &str) -> Result<()> {
    let (key, raw) = pair
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{pair}` is not of the form key=value")))?;
    let key = key.trim();
    if key.is_empty() {
        return Err(Error::Config(format!("override `{pair}` has an empty key")));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = doc;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let unknown = || Error::Config(format!("unknown config key `{key}`"));
        let obj = node.as_object_mut().ok_or_else(unknown)?;
        let child = obj.get_mut(*part).ok_or_else(unknown)?;
        if i + 1 == parts.len() {
            *child = value;
            return Ok(());
        }
        node = child;
    }
    unreachable!("split yields at least one part")
}

fn validator() -> &'static jsonschema::Validator {
    static VALIDATOR: OnceLock<jsonschema::Validator> = OnceLock::new();
    VALIDATOR.get_or_init(|| {
        let schema: Value = serde_json::from_str(SCHEMA).expect("published schema is valid JSON");
        jsonschema::validator_for(&schema).expect("published schema compiles")
    })
}

fn check_schema(doc: &Value) -> Result<()> {
    let errors: Vec<String> = validator()
        .iter_errors(doc)
        .map(|e| {
            let at = e.instance_path.to_string();
            format!("{}: {e}", if at.is_empty() { "/" } else { at.as_str() })
        })
        .collect();
    if errors.is_empty() {
        Ok(())
    } else {
        Err(Error::Config(format!("config does not match the schema: {}", errors.join("; "))))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        let cfg = Config::resolve(None, None, &[]).unwrap();
        assert_eq!(cfg, Config::default());
    }

    #[test]
    fn override_precedence() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("c.json");
        std::fs::write(&file, r#"{"trainer": {"seed": 5, "epochs": 2}}"#).unwrap();
        let cfg = Config::resolve(Some(&file), None, &[]).unwrap();
        assert_eq!((cfg.trainer.seed, cfg.trainer.epochs), (5, 2));
        let cfg = Config::resolve(Some(&file), Some("9"), &[]).unwrap();
        assert_eq!(cfg.trainer.seed, 9);
        let cfg = Config::resolve(Some(&file), Some("9"), &["trainer.seed=11".into()]).unwrap();
        assert_eq!(cfg.trainer.seed, 11);
        let cfg = Config::resolve(None, None, &["trainer.variant=no_kd".into()]).unwrap();
        assert_eq!(cfg.trainer.variant, crate::model::Variant::NoKd);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for bad in ["trainer.nope=1", "nope=1", "trainer.seed.x=1", "noequals"] {
            let err = Config::resolve(None, None, &[bad.to_string()]).unwrap_err();
            assert!(err.is_validation(), "{bad}: {err}");
        }
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("c.json");
        std::fs::write(&file, r#"{"model": {"depth": 3}}"#).unwrap();
        assert!(Config::resolve(Some(&file), None, &[]).is_err());
    }

    #[test]
    fn schema_rejects_wrong_types() {
        let err = Config::resolve(None, None, &["trainer.epochs=\"many\"".into()]).unwrap_err();
        assert!(err.to_string().contains("schema"), "{err}");
        assert!(Config::resolve(None, None, &["trainer.variant=bogus".into()]).is_err());
        assert!(Config::resolve(None, Some("abc"), &[]).is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = Config::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.trainer.seed += 1;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 16);
    }

    #[test]
    fn cross_module_consistency() {
        assert!(Config::resolve(None, None, &["model.num_classes=5".into()]).is_err());
        assert!(Config::resolve(None, None, &["augment.out_height=16".into()]).is_err());
    }

    fn schema_default<'a>(schema: &'a Value, path: &[&str]) -> Option<&'a Value> {
        let mut node = schema;
        for p in path {
            node = node.get("properties")?.get(*p)?;
        }
        node.get("default")
    }

    fn leaves(v: &Value, path: &mut Vec<String>, out: &mut Vec<(Vec<String>, Value)>) {
        match v {
            Value::Object(m) => {
                for (k, child) in m {
                    path.push(k.clone());
                    leaves(child, path, out);
                    path.pop();
                }
            }
            other => out.push((path.clone(), other.clone())),
        }
    }

    #[test]
    fn every_default_appears_in_the_schema() {
        let schema: Value = serde_json::from_str(SCHEMA).unwrap();
        let mut all = Vec::new();
        leaves(&serde_json::to_value(Config::default()).unwrap(), &mut Vec::new(), &mut all);
        assert!(all.len() > 50);
        for (path, value) in all {
            let refs: Vec<&str> = path.iter().map(String::as_str).collect();
            let found = schema_default(&schema, &refs);
            assert_eq!(found, Some(&value), "schema default for {}", path.join("."));
        }
    }
}
