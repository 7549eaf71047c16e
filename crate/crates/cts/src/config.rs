//! Run configuration: one JSON document of nested sections, addressable by
//! flat dotted keys (`train.lr`) for command-line overrides.

use std::fs;
use std::path::Path;

use cts_core::ScheduleConfig;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::data::PreprocessConfig;
use crate::error::{Error, Result};
use crate::networks::{ArchitectureConfig, ConsistencyModel};
use crate::training::TrainerConfig;

pub const RESOLVED_CONFIG_FILE: &str = "config.resolved.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    /// Probability threshold for the binary mask.
    pub threshold: f64,
    /// Sample with the EMA target parameters rather than the online ones.
    pub use_target: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { threshold: 0.5, use_target: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schedule: ScheduleConfig,
    pub arch: ArchitectureConfig,
    pub train: TrainerConfig,
    pub sampler: SamplerConfig,
    pub preprocess: PreprocessConfig,
}

/// Training step counts at desk scale are a few thousand, so the
/// discretization curriculum tops out at `s1 = 20` levels instead of the
/// schedule's stock 150, which needs hundreds of thousands of steps to
/// propagate the boundary condition up to `T`.
pub const DESK_S1: u32 = 20;

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schedule: ScheduleConfig { s1: DESK_S1, ..ScheduleConfig::default() },
            arch: ArchitectureConfig::default(),
            train: TrainerConfig::default(),
            sampler: SamplerConfig::default(),
            preprocess: PreprocessConfig::default(),
        }
    }
}

impl RunConfig {
    /// Keeps the schedule's horizon equal to the training length, which is
    /// what the curriculum and EMA decay are defined against.
    pub fn resolved(mut self) -> Self {
        self.schedule.total_train_steps = self.train.total_steps;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        self.arch.validate()?;
        self.train.validate()?;
        if self.schedule.total_train_steps != self.train.total_steps {
            return Err(Error::InvalidArgument(format!(
                "schedule.total_train_steps ({}) differs from train.total_steps ({})",
                self.schedule.total_train_steps, self.train.total_steps
            )));
        }
        if !(self.sampler.threshold > 0.0 && self.sampler.threshold < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "sampler.threshold must lie in (0, 1), got {}",
                self.sampler.threshold
            )));
        }
        Ok(())
    }

    pub fn model(&self) -> ConsistencyModel {
        ConsistencyModel {
            arch: self.arch.clone(),
            schedule: self.schedule.clone(),
            multiscale: self.train.use_multiscale,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(Error::json("run config"))
    }

    /// Hex SHA-256 of the canonical (compact, field-ordered) serialization.
    pub fn hash(&self) -> Result<String> {
        let bytes = serde_json::to_vec(self).map_err(Error::json("run config"))?;
        Ok(hex::encode(Sha256::digest(bytes)))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(Error::io(path))?;
        let value: Value = serde_json::from_str(&text).map_err(Error::json(path.display().to_string()))?;
        Self::from_value(value)
    }

    /// Writes the flat dotted-key form, one leaf per key.
    pub fn save(&self, path: &Path) -> Result<()> {
        let flat: serde_json::Map<String, Value> = self.flat_keys()?.into_iter().collect();
        let text = serde_json::to_string_pretty(&flat).map_err(Error::json("run config"))?;
        fs::write(path, text + "\n").map_err(Error::io(path))
    }

    /// Applies `key=value` style overrides; values parse as JSON and fall
    /// back to plain strings.
    pub fn with_overrides<'a>(&self, overrides: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self> {
        let mut value = serde_json::to_value(self).map_err(Error::json("run config"))?;
        for (key, raw) in overrides {
            set_dotted(&mut value, key, parse_value(raw))?;
        }
        Self::from_value(value)
    }

    /// Every leaf as `(dotted.key, value)`, in field order.
    pub fn flat_keys(&self) -> Result<Vec<(String, Value)>> {
        let value = serde_json::to_value(self).map_err(Error::json("run config"))?;
        let mut out = Vec::new();
        flatten("", &value, &mut out);
        Ok(out)
    }

    /// Every key present in `value` overrides [`RunConfig::default`].
    fn from_value(value: Value) -> Result<Self> {
        let mut merged = serde_json::to_value(Self::default()).map_err(Error::json("run config"))?;
        let mut leaves = Vec::new();
        flatten("", &unflatten(value)?, &mut leaves);
        for (key, v) in leaves {
            set_dotted(&mut merged, &key, v)?;
        }
        serde_json::from_value(merged).map_err(|e| Error::InvalidArgument(format!("bad configuration: {e}")))
    }
}

fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

fn set_dotted(root: &mut Value, key: &str, new: Value) -> Result<()> {
    let unknown = || Error::InvalidArgument(format!("unknown configuration key `{key}`"));
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let map = node.as_object_mut().ok_or_else(unknown)?;
        let child = map.get_mut(*part).ok_or_else(unknown)?;
        if i + 1 == parts.len() {
            if child.is_object() {
                return Err(Error::InvalidArgument(format!("`{key}` is a section, not a value")));
            }
            *child = new;
            return Ok(());
        }
        node = child;
    }
    Err(unknown())
}

fn flatten(prefix: &str, value: &Value, out: &mut Vec<(String, Value)>) {
    match value {
        Value::Object(map) => {
            for (k, v) in map {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, v, out);
            }
        }
        other => out.push((prefix.to_string(), other.clone())),
    }
}

/// Config files may mix nested sections with flat dotted keys.
fn unflatten(value: Value) -> Result<Value> {
    let Value::Object(map) = value else {
        return Err(Error::InvalidArgument("configuration must be a JSON object".into()));
    };
    let mut nested = Value::Object(Map::new());
    let mut dotted = Vec::new();
    for (k, v) in map {
        if k.contains('.') {
            dotted.push((k, v));
        } else {
            nested.as_object_mut().expect("object").insert(k, v);
        }
    }
    for (k, v) in dotted {
        let mut node = &mut nested;
        let parts: Vec<&str> = k.split('.').collect();
        for part in &parts[..parts.len() - 1] {
            let map = node
                .as_object_mut()
                .ok_or_else(|| Error::InvalidArgument(format!("key `{k}` collides with a value")))?;
            node = map.entry(part.to_string()).or_insert_with(|| Value::Object(Map::new()));
        }
        let map = node
            .as_object_mut()
            .ok_or_else(|| Error::InvalidArgument(format!("key `{k}` collides with a value")))?;
        map.insert(parts[parts.len() - 1].to_string(), v);
    }
    Ok(nested)
}
