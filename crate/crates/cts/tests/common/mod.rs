#![allow(dead_code)]

pub mod gradcheck;

use std::path::Path;

use cts::config::RunConfig;
use cts::data::{generate_synthetic_dataset, load_dataset, Dataset, SyntheticConfig};
use cts::networks::ArchitectureConfig;

/// A small but complete dataset: 16×16 images, a handful per split.
pub fn small_synthetic(seed: u64) -> SyntheticConfig {
    SyntheticConfig {
        image_size: 16,
        n_train: 8,
        n_val: 4,
        n_test: 4,
        seed,
        ..Default::default()
    }
}

pub fn write_and_load(cfg: &SyntheticConfig, dir: &Path) -> Dataset {
    generate_synthetic_dataset(cfg, dir).unwrap();
    load_dataset(dir, &RunConfig::default().preprocess).unwrap()
}

pub fn tiny_arch() -> ArchitectureConfig {
    ArchitectureConfig {
        depth: 2,
        base_channels: 4,
        channel_mult: vec![1, 2],
        time_embed_dim: 8,
        attention_reduction: 2,
        norm_groups: 2,
        zero_init_output: true,
    }
}

/// Tiny, fast run configuration over `steps` steps.
pub fn tiny_run(steps: u64, seed: u64) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.arch = tiny_arch();
    cfg.train.total_steps = steps;
    cfg.train.batch_size = 2;
    cfg.train.seed = seed;
    cfg.train.eval_interval = 0;
    cfg.train.checkpoint_interval = 0;
    cfg.resolved()
}
