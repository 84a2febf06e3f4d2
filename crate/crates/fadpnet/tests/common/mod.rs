#![allow(dead_code)]

use std::path::Path;

use fadpnet::config::TrainConfig;
use fadpnet::data::{load_split, write_synthetic, Manifest, Sample, Split};
use fadpnet_core::lfeb::PromptConfig;
use fadpnet_core::net::ModelConfig;

/// Toy layout at half width with a small prompt pool; cheap enough to train
/// a few steps inside a unit test.
pub fn tiny_model() -> ModelConfig {
    ModelConfig {
        base_channels: 8,
        prompt: PromptConfig { prompts: 4, rank: 1, state_dim: 4 },
        hfeb_wide_blocks: 1,
        temp_hidden: 4,
        ..ModelConfig::toy()
    }
}

pub fn tiny_train(out_dir: &Path) -> TrainConfig {
    TrainConfig {
        lr: 1e-3,
        batch: 2,
        epochs: 100,
        max_steps: Some(4),
        checkpoint_every: 0,
        eval_every: 0,
        out_dir: out_dir.to_path_buf(),
        ..TrainConfig::default()
    }
}

/// Synthetic faces on disk plus the loaded samples of every split.
pub fn fixture(dir: &Path, train: usize, test: usize, size: usize, scale: usize) -> (Manifest, Vec<Sample>, Vec<Sample>) {
    let m = write_synthetic(dir, [(Split::Train, train), (Split::Val, 0), (Split::Test, test)], size, 3).unwrap();
    let (tr, skipped) = load_split(&m, Split::Train, size, scale).unwrap();
    assert!(skipped.is_empty(), "{skipped:?}");
    let (te, _) = load_split(&m, Split::Test, size, scale).unwrap();
    (m, tr, te)
}

pub fn bits(t: &fadpnet_core::Tensor<f32>) -> Vec<u32> {
    t.data().iter().map(|v| v.to_bits()).collect()
}
