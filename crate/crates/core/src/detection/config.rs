use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Result};
use crate::geometry::{AspectRatio, BoxCoding, DEFAULT_INPUT_SIZE, DEFAULT_RATIOS, DEFAULT_SCALES};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    /// Output channels of each block. Every block but the last halves the
    /// spatial extent.
    pub channels: Vec<usize>,
    pub convs_per_block: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            channels: vec![16, 32, 64],
            convs_per_block: 2,
        }
    }
}

impl BackboneConfig {
    pub fn stride(&self) -> usize {
        1 << self.channels.len().saturating_sub(1)
    }

    pub fn out_channels(&self) -> usize {
        *self.channels.last().unwrap_or(&0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorConfig {
    /// Square input extent in pixels.
    pub input_size: usize,
    pub backbone: BackboneConfig,
    pub anchor_scales: Vec<f64>,
    pub anchor_ratios: Vec<AspectRatio>,
    pub rpn_channels: usize,
    pub positive_iou: f64,
    pub negative_iou: f64,
    /// Max positives and max negatives sampled per image for the RPN loss.
    pub rpn_sample_cap: usize,
    /// Proposals passed to the RCNN head at inference.
    pub top_k: usize,
    /// Proposals passed to the RCNN head per training image.
    pub train_top_k: usize,
    /// A proposal counts as lesion for RCNN training at this IoU.
    pub rcnn_positive_iou: f64,
    pub rcnn_channels: usize,
    pub rcnn_hidden: usize,
    pub score_threshold: f64,
    pub nms_threshold: f64,
    pub box_coding: BoxCoding,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            input_size: DEFAULT_INPUT_SIZE,
            backbone: BackboneConfig::default(),
            anchor_scales: DEFAULT_SCALES.to_vec(),
            anchor_ratios: DEFAULT_RATIOS.to_vec(),
            rpn_channels: 32,
            positive_iou: 0.7,
            negative_iou: 0.4,
            rpn_sample_cap: 128,
            top_k: 64,
            train_top_k: 16,
            rcnn_positive_iou: 0.5,
            rcnn_channels: 32,
            rcnn_hidden: 64,
            score_threshold: 0.5,
            nms_threshold: 0.5,
            box_coding: BoxCoding::Offsets,
        }
    }
}

impl DetectorConfig {
    /// Default configuration with anchor scales rescaled to `input_size`.
    pub fn for_input(input_size: usize) -> Self {
        let f = input_size as f64 / DEFAULT_INPUT_SIZE as f64;
        DetectorConfig {
            input_size,
            anchor_scales: DEFAULT_SCALES.iter().map(|s| s * f).collect(),
            ..Default::default()
        }
    }

    pub fn anchor_types(&self) -> usize {
        self.anchor_scales.len() * self.anchor_ratios.len()
    }

    pub fn feature_size(&self) -> usize {
        self.input_size / self.backbone.stride()
    }

    pub fn validate(&self) -> Result<()> {
        let stride = self.backbone.stride();
        if self.backbone.channels.is_empty() || self.backbone.channels.contains(&0) {
            return arg_err("backbone needs at least one block with positive channels");
        }
        if self.backbone.convs_per_block == 0 {
            return arg_err("backbone blocks need at least one convolution");
        }
        if self.input_size == 0 || !self.input_size.is_multiple_of(stride) {
            return arg_err(format!(
                "input size {} is not divisible by backbone stride {stride}",
                self.input_size
            ));
        }
        if self.feature_size() < crate::geometry::ANCHOR_PATCH {
            return arg_err("feature map is smaller than one anchor patch");
        }
        for (name, v) in [
            ("positive_iou", self.positive_iou),
            ("negative_iou", self.negative_iou),
            ("rcnn_positive_iou", self.rcnn_positive_iou),
            ("score_threshold", self.score_threshold),
            ("nms_threshold", self.nms_threshold),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return arg_err(format!("{name} = {v} outside [0, 1]"));
            }
        }
        if self.negative_iou > self.positive_iou {
            return arg_err("negative IoU threshold exceeds the positive one");
        }
        if self.anchor_scales.is_empty() || self.anchor_ratios.is_empty() {
            return arg_err("anchor scales and ratios must be non-empty");
        }
        if self.top_k == 0 || self.train_top_k == 0 {
            return arg_err("proposal counts must be positive");
        }
        Ok(())
    }
}
