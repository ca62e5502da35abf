//! Datasets, synthetic lesions, splits and evaluation metrics.

mod dataset;
mod metrics;
mod split;
mod synth;

pub use dataset::{
    contour, evaluate_mask_dirs, image_to_tensor, load_dataset, load_mask_png, render_boxes,
    render_contours, resize_image, resize_pair, save_dataset, save_mask_png, tensor_to_rgb,
    LabeledSample, GT_COLOR, MANIFEST_NAME, PRED_COLOR,
};
pub use metrics::{
    aggregate, compute_metrics, AggregateReport, EvalReport, MetricValues, MetricsReport,
    SampleReport,
};
pub use split::{kfold_split, split_indices, Split};
pub use synth::{synth_generate, synth_sample};
