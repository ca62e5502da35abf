#![allow(dead_code)]

pub mod grads;
pub mod oracles;

use lesion_core::data::{synth_generate, LabeledSample};
use lesion_core::detection::DetectorConfig;
use lesion_core::training::TrainConfig;

/// Small detector and SkinNet for fast schedule tests.
pub fn tiny_config(size: usize) -> TrainConfig {
    let mut cfg = TrainConfig::desk(size);
    cfg.detector = DetectorConfig::for_input(size);
    cfg.detector.backbone.channels = vec![4, 8, 8];
    cfg.detector.rpn_channels = 8;
    cfg.detector.rcnn_channels = 4;
    cfg.detector.rcnn_hidden = 8;
    cfg.detector.train_top_k = 4;
    cfg.skinnet.input_size = 16;
    cfg.skinnet.blocks = 2;
    cfg.skinnet.layers = 1;
    cfg.skinnet.growth = 4;
    cfg.skinnet.stem_channels = 4;
    cfg.skinnet.bottleneck_channels = 4;
    cfg.skinnet.decoder_channels = 4;
    cfg.skinnet.dilation_rates = vec![1, 2];
    cfg.batch_size = 2;
    cfg
}

pub fn tiny_data(n: usize, seed: u64, size: usize) -> Vec<LabeledSample> {
    synth_generate(n, seed, size).unwrap()
}
