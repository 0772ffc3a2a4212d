//! Run configuration: a TOML key tree whose keys mirror the library's
//! config structs, plus `key.path=value` overrides.
//!
//! ```toml
//! [train]
//! epochs = 150
//! batch_size = 8
//! adam.step_size = 0.03
//! eot.rotate_deg = { lo = -20.0, hi = 20.0 }
//! weights.lambda_tv = 8.5e-7
//!
//! [eval]
//! repetitions = 10
//! score_threshold = 0.5
//!
//! [patch]
//! height = 300
//! width = 200
//! init = "random:0"
//!
//! [data]
//! train_root = "corpus/train"
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::EvalConfig;
use crate::patch::{InitSpec, DEFAULT_ASPECT, DEFAULT_SIZE};
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PatchConfig {
    pub height: usize,
    pub width: usize,
    /// `random:<seed>`, `constant:<r>,<g>,<b>` or `image:<path>`.
    pub init: String,
    /// Height/width ratio used when placing the patch on a person.
    pub aspect_hint: f64,
}

impl Default for PatchConfig {
    fn default() -> Self {
        Self {
            height: DEFAULT_SIZE.0,
            width: DEFAULT_SIZE.1,
            init: "random:0".into(),
            aspect_hint: DEFAULT_ASPECT,
        }
    }
}

impl PatchConfig {
    pub fn init_spec(&self) -> Result<InitSpec> {
        self.init.parse()
    }
}

/// Inputs. Unset corpus roots fall back to procedural toy scenes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub train_root: Option<PathBuf>,
    pub test_root: Option<PathBuf>,
    pub palette: Option<PathBuf>,
    /// Directory holding `toy_detector.json` and `toy_detector.bin`.
    pub detector: Option<PathBuf>,
    pub synthetic_train: usize,
    pub synthetic_test: usize,
    pub synthetic_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_root: None,
            test_root: None,
            palette: None,
            detector: None,
            synthetic_train: 16,
            synthetic_test: 16,
            synthetic_seed: 1,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Config {
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub patch: PatchConfig,
    pub data: DataConfig,
}

impl Config {
    /// Parses TOML text, applies `overrides` (`a.b.c=value`, value in TOML
    /// syntax, bare words taken as strings) and rejects unknown keys.
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let mut tree: toml::Table = text.parse().map_err(|e| Error::Config(format!("{e}")))?;
        for o in overrides {
            apply_override(&mut tree, o)?;
        }
        let value = toml::Value::Table(tree);
        let cfg: Config = value
            .clone()
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        let known = toml::Value::try_from(&cfg).map_err(|e| Error::Config(e.to_string()))?;
        if let Some(key) = first_unknown(&value, &known, "") {
            return Err(Error::Config(format!("unknown config key {key:?}")));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
            None => String::new(),
        };
        Self::from_toml(&text, overrides)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.eval.validate()?;
        self.patch.init_spec()?;
        if !(self.patch.aspect_hint.is_finite() && self.patch.aspect_hint > 0.0) {
            return Err(Error::Config("patch.aspect_hint must be positive".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }
}

fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    doc.parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn apply_override(tree: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {spec:?} is not key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("override key {key:?} is malformed")));
    }
    let (leaf, path) = parts.split_last().expect("non-empty key");
    let mut node = tree;
    for p in path {
        let entry = node
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override {key:?}: {p:?} is not a table")))?;
    }
    node.insert(leaf.to_string(), parse_value(raw.trim()));
    Ok(())
}

fn first_unknown(given: &toml::Value, known: &toml::Value, prefix: &str) -> Option<String> {
    let (toml::Value::Table(g), toml::Value::Table(k)) = (given, known) else {
        return None;
    };
    for (name, v) in g {
        let path = if prefix.is_empty() {
            name.clone()
        } else {
            format!("{prefix}.{name}")
        };
        match k.get(name) {
            None => return Some(path),
            Some(kv) => {
                if let Some(bad) = first_unknown(v, kv, &path) {
                    return Some(bad);
                }
            }
        }
    }
    None
}
