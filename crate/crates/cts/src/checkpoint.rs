//! Checkpoints: a safetensors weights blob plus a JSON manifest carrying the
//! step, the resolved config and its hash, and the random-stream state.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::networks::init_params;
use crate::params::ModelParams;
use crate::training::{EvalRecord, TrainerState};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const WEIGHTS_FILE: &str = "weights.safetensors";

const GROUPS: [&str; 4] = ["online", "target", "adam_m", "adam_v"];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub step: u64,
    pub config_hash: String,
    pub config: RunConfig,
    /// Latest validation metrics at save time.
    pub metrics: Option<EvalRecord>,
    pub weights: String,
    pub weights_sha256: String,
    pub rng_state: ChaCha8Rng,
}

/// A checkpoint read back from disk.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub manifest: CheckpointManifest,
    pub state: TrainerState,
}

impl Checkpoint {
    pub fn config(&self) -> &RunConfig {
        &self.manifest.config
    }

    /// Parameters used for sampling, following `sampler.use_target`.
    pub fn sampling_params(&self) -> Result<ModelParams> {
        if self.manifest.config.sampler.use_target {
            Ok(self.state.target.clone())
        } else {
            self.state.online_params()?.detached_copy()
        }
    }
}

fn corrupt(dir: &Path, reason: impl Into<String>) -> Error {
    Error::Checkpoint { path: dir.to_path_buf(), reason: reason.into() }
}

pub fn save_checkpoint(state: &TrainerState, cfg: &RunConfig, metrics: Option<&EvalRecord>, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(Error::io(dir))?;
    let online = state.online_params()?;
    let mut blob: HashMap<String, Tensor> = HashMap::new();
    let sets: [&[Tensor]; 4] = [online.tensors(), state.target.tensors(), &state.adam_m, &state.adam_v];
    for (group, tensors) in GROUPS.iter().zip(sets) {
        for (name, t) in state.target.names().iter().zip(tensors) {
            blob.insert(format!("{group}/{name}"), t.clone());
        }
    }
    let weights_path = dir.join(WEIGHTS_FILE);
    candle_core::safetensors::save(&blob, &weights_path)?;
    let bytes = fs::read(&weights_path).map_err(Error::io(&weights_path))?;
    let manifest = CheckpointManifest {
        format_version: CHECKPOINT_FORMAT_VERSION,
        step: state.step,
        config_hash: cfg.hash()?,
        config: cfg.clone(),
        metrics: metrics.cloned(),
        weights: WEIGHTS_FILE.to_string(),
        weights_sha256: hex::encode(Sha256::digest(&bytes)),
        rng_state: state.rng.clone(),
    };
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).map_err(Error::json("checkpoint manifest"))?;
    fs::write(&path, text + "\n").map_err(Error::io(&path))
}

/// Loads and verifies a checkpoint directory.
pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(Error::io(&path))?;
    let raw: serde_json::Value = serde_json::from_str(&text).map_err(Error::json(path.display().to_string()))?;
    let version = raw.get("format_version").and_then(serde_json::Value::as_u64);
    if version != Some(u64::from(CHECKPOINT_FORMAT_VERSION)) {
        return Err(corrupt(
            dir,
            format!("unsupported format version {version:?}, expected {CHECKPOINT_FORMAT_VERSION}"),
        ));
    }
    let manifest: CheckpointManifest =
        serde_json::from_value(raw).map_err(|e| corrupt(dir, format!("malformed manifest: {e}")))?;
    let cfg = &manifest.config;
    if cfg.hash()? != manifest.config_hash {
        return Err(corrupt(dir, "config hash does not match the stored config"));
    }
    cfg.validate()?;
    if manifest.step > cfg.train.total_steps {
        return Err(corrupt(dir, format!("step {} is past total_steps", manifest.step)));
    }

    let weights_path = dir.join(&manifest.weights);
    let bytes = fs::read(&weights_path).map_err(Error::io(&weights_path))?;
    if hex::encode(Sha256::digest(&bytes)) != manifest.weights_sha256 {
        return Err(corrupt(dir, "weights blob checksum mismatch"));
    }
    let mut blob = candle_core::safetensors::load_buffer(&bytes, &Device::Cpu)
        .map_err(|e| corrupt(dir, format!("unreadable weights blob: {e}")))?;

    let template = init_params(&cfg.arch, cfg.train.seed, DType::F32)?;
    let mut take = |group: &str| -> Result<Vec<Tensor>> {
        template
            .iter()
            .map(|(name, t)| {
                let key = format!("{group}/{name}");
                let loaded = blob.remove(&key).ok_or_else(|| corrupt(dir, format!("missing tensor {key}")))?;
                if loaded.shape() != t.shape() || loaded.dtype() != t.dtype() {
                    return Err(corrupt(dir, format!("tensor {key} has the wrong shape or type")));
                }
                Ok(loaded)
            })
            .collect()
    };
    let online = template.with_tensors(take(GROUPS[0])?)?;
    let target = template.with_tensors(take(GROUPS[1])?)?;
    let adam_m = take(GROUPS[2])?;
    let adam_v = take(GROUPS[3])?;
    if let Some(extra) = blob.keys().next() {
        return Err(corrupt(dir, format!("unexpected tensor {extra}")));
    }
    let state = TrainerState {
        step: manifest.step,
        online: online.to_vars()?,
        target,
        adam_m,
        adam_v,
        rng: manifest.rng_state.clone(),
    };
    Ok(Checkpoint { manifest, state })
}

/// Like [`load_checkpoint`], but also requires the stored config to hash to
/// `expected_hash`.
pub fn load_checkpoint_for(dir: &Path, expected_hash: &str) -> Result<Checkpoint> {
    let ckpt = load_checkpoint(dir)?;
    if ckpt.manifest.config_hash != expected_hash {
        return Err(corrupt(
            dir,
            format!("config hash {} does not match expected {expected_hash}", ckpt.manifest.config_hash),
        ));
    }
    Ok(ckpt)
}
