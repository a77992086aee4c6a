#![allow(dead_code)]

use std::path::{Path, PathBuf};

use radlads::harness::config::RunConfig;

pub fn manifest() -> &'static Path {
    Path::new(env!("CARGO_MANIFEST_DIR"))
}

pub fn fixture(name: &str) -> PathBuf {
    manifest().join("tests/fixtures").join(name)
}

pub fn corpus_path() -> PathBuf {
    manifest().join("../../data/shakespeare.txt")
}

/// The small test configuration with an absolute corpus path.
pub fn tiny_config() -> RunConfig {
    let mut cfg = RunConfig::from_file(&fixture("tiny.cfg")).unwrap();
    cfg.corpus = corpus_path();
    cfg
}
