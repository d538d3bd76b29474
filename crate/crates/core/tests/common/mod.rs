//! Shared fixtures and independent oracles for the integration tests.
#![allow(dead_code)]

pub mod checks;
pub mod grad;
pub mod oracles;

use mmfsod::config::RunConfig;
use mmfsod::dataspec::{toy_split, ClassSplit, Dataset, ToySpec};

/// A model small enough that a training iteration takes milliseconds.
pub fn tiny_config() -> RunConfig {
    let mut c = RunConfig::default();
    let m = &mut c.model;
    m.image_size = 32;
    m.support_size = 16;
    m.stage_channels = [4, 8, 8];
    m.feature_dim = 8;
    m.roi_dim = 8;
    m.roi_size = 3;
    m.text_dim = 8;
    m.text_layers = 1;
    m.text_hidden = 16;
    m.anchor_sizes = vec![8.0, 12.0, 16.0];
    m.rpn_hidden = 8;
    m.head_hidden = 8;
    c.mpg.prompt_len = 4;
    c.episode.shot = 2;
    c.episode.queries = 2;
    c.episode.support_context = 2.0;
    c.train.batch_size = 2;
    c.train.iterations = 6;
    c.train.decay_step = 4;
    c.finetune.batch_size = 2;
    c.finetune.iterations = 4;
    c.finetune.decay_step = 2;
    c.loss.rpn_samples = 16;
    c.loss.roi_samples = 16;
    c.loss.train_proposals = 20;
    c.eval.shots = vec![1];
    c.eval.seeds = vec![0, 1];
    c.eval.top_n = 20;
    c
}

pub fn tiny_toy(num_images: usize, seed: u64) -> ToySpec {
    ToySpec {
        num_classes: 12,
        num_images,
        image_size: 32,
        max_objects: 2,
        seed,
        min_object: 8,
        max_object: 14,
    }
}

pub struct TinyData {
    pub train: Dataset,
    pub test: Dataset,
    pub split: ClassSplit,
}

pub fn tiny_data() -> TinyData {
    TinyData {
        train: tiny_toy(80, 3).generate().unwrap(),
        test: tiny_toy(12, 4).generate().unwrap(),
        split: toy_split(12),
    }
}
