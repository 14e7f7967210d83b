#![allow(dead_code)]

use std::path::{Path, PathBuf};

use masters::config::{load_config, RunConfig};
use masters::pipeline;
use masters::trainer::Mode;

pub fn config_path(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

/// The smoke configuration rooted at `root`, plus extra overrides.
pub fn smoke_config(root: &Path, extra: &[&str]) -> RunConfig {
    let mut sets = vec![format!("paths.root = {:?}", root.display().to_string())];
    sets.extend(extra.iter().map(|s| s.to_string()));
    load_config(&config_path("smoke.toml"), &sets).unwrap()
}

/// Everything up to a judged store.
pub fn prepare(config: &RunConfig) {
    pipeline::gen_tasks(config, false).unwrap();
    pipeline::pretrain_teachers(config, None, false).unwrap();
    pipeline::mask_teachers(config, None, false).unwrap();
    pipeline::pregenerate_store(config, None, false).unwrap();
    pipeline::judge_store(config, None).unwrap();
}

pub fn run_dir(config: &RunConfig, mode: Mode) -> PathBuf {
    pipeline::Layout::new(config).run_dir(mode)
}
