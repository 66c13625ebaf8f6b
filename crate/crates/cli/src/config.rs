//! Run configuration: one JSON document with `model`, `train` and `data`
//! sections, plus dotted `key=value` overrides.

use std::fs;
use std::path::{Path, PathBuf};

use attnseg_core::data::{Split, SynthConfig};
use attnseg_core::model::ModelConfig;
use attnseg_core::train::TrainConfig;
use attnseg_core::{Error, Result};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Dataset manifest. Takes precedence over `synth`.
    pub manifest: Option<PathBuf>,
    /// Synthetic blob set written to `<out>/data` when no manifest is given.
    pub synth: Option<SynthConfig>,
    /// Checkpoint for eval, infer and explain; defaults to `<out>/best.ckpt`.
    pub checkpoint: Option<PathBuf>,
    /// Split read by eval, infer and explain.
    pub split: Split,
    /// Explicit images for infer and explain, used instead of the split.
    pub images: Vec<PathBuf>,
}

/// Reads `path` (or starts from defaults), applies overrides and validates.
pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let mut doc = match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            serde_json::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", p.display())))?
        }
        None => Value::Object(Map::new()),
    };
    for o in overrides {
        apply_override(&mut doc, o)?;
    }
    let cfg: RunConfig = serde_json::from_value(doc).map_err(|e| Error::config(e.to_string()))?;
    cfg.model.validate()?;
    cfg.train.validate()?;
    Ok(cfg)
}

/// Sets a dotted key such as `train.lr0=1e-3`. The value is parsed as JSON
/// when possible and taken as a string otherwise.
pub fn apply_override(doc: &mut Value, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::config(format!("override {spec:?} is not key=value")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::config(format!("override key {key:?} is malformed")));
    }
    let mut node = doc;
    for p in &parts[..parts.len() - 1] {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| Error::config(format!("override {key:?} descends into a non-object")))?;
        node = obj.entry(p.to_string()).or_insert_with(|| Value::Object(Map::new()));
        if node.is_null() {
            *node = Value::Object(Map::new());
        }
    }
    node.as_object_mut()
        .ok_or_else(|| Error::config(format!("override {key:?} descends into a non-object")))?
        .insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}
