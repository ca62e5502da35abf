//! Detection followed by SkinNet segmentation of the detected crop.

use serde::{Deserialize, Serialize};

use crate::data::{compute_metrics, resize_image, LabeledSample, MetricsReport};
use crate::detection::{Detection, Detector};
use crate::error::{arg_err, Result};
use crate::geometry::{iou, BBox};
use crate::mask::Mask;
use crate::skinnet::SkinNet;
use crate::tensor::kernels::{resample_forward, span_coords};
use crate::tensor::Tensor;

/// Fraction of the box extent added on each side before cropping.
pub const CROP_MARGIN: f64 = 0.1;

/// Expanded, clipped and integer-aligned crop window around `bbox`.
pub fn crop_window(bbox: &BBox, margin: f64, height: usize, width: usize) -> Option<BBox> {
    let b = bbox
        .expand(margin, width as f64, height as f64)?
        .round_out();
    b.clip(width as f64, height as f64)
}

fn window_pixels(window: &BBox) -> (usize, usize, usize, usize) {
    (
        window.x1 as usize,
        window.y1 as usize,
        window.x2 as usize,
        window.y2 as usize,
    )
}

/// Bilinear crop of the pixels inside an integer window, resampled to
/// `size x size` with the window's corner pixels on the output corners.
pub fn crop_image(image: &Tensor, window: &BBox, size: usize) -> Result<Tensor> {
    let (h, w, c) = image.dims3()?;
    let (x1, y1, x2, y2) = window_pixels(window);
    if x2 > w || y2 > h || x1 >= x2 || y1 >= y2 {
        return arg_err(format!("crop window {window:?} outside {h}x{w} image"));
    }
    let ys = span_coords(y1 as f64, (y2 - 1) as f64, size);
    let xs = span_coords(x1 as f64, (x2 - 1) as f64, size);
    Tensor::new(
        vec![size, size, c],
        resample_forward(image.data(), (h, w, c), &ys, &xs),
    )
}

/// Nearest-neighbour counterpart of [`crop_image`] for masks.
pub fn crop_mask(mask: &Mask, window: &BBox, size: usize) -> Result<Mask> {
    let (x1, y1, x2, y2) = window_pixels(window);
    if x2 > mask.width() || y2 > mask.height() || x1 >= x2 || y1 >= y2 {
        return arg_err(format!(
            "crop window {window:?} outside {}x{} mask",
            mask.height(),
            mask.width()
        ));
    }
    let inner = Mask::from_fn(y2 - y1, x2 - x1, |r, c| mask.get(y1 + r, x1 + c));
    Ok(inner.resize_nearest(size, size))
}

/// Paste a crop-resolution mask back into a full-size canvas.
pub fn paste_mask(crop: &Mask, window: &BBox, height: usize, width: usize) -> Mask {
    let (x1, y1, x2, y2) = window_pixels(window);
    let inner = crop.resize_nearest(y2 - y1, x2 - x1);
    let mut out = Mask::zeros(height, width);
    for r in 0..inner.height() {
        for c in 0..inner.width() {
            if inner.get(r, c) {
                out.set(y1 + r, x1 + c, true);
            }
        }
    }
    out
}

/// Lesion mask from a probability map `[S, S, 2]` at threshold 0.5.
pub fn binarize(probs: &Tensor) -> Result<Mask> {
    let (h, w, c) = probs.dims3()?;
    if c != 2 {
        return arg_err(format!("expected 2 probability channels, got {c}"));
    }
    Ok(Mask::from_fn(h, w, |r, col| probs.at3(r, col, 1) > 0.5))
}

/// Segment the lesion inside `bbox` with SkinNet.
pub fn segment_box(image: &Tensor, skinnet: &SkinNet, bbox: &BBox) -> Result<(Mask, Option<BBox>)> {
    let (h, w, _) = image.dims3()?;
    let Some(window) = crop_window(bbox, CROP_MARGIN, h, w) else {
        return Ok((Mask::zeros(h, w), None));
    };
    let crop = crop_image(image, &window, skinnet.config.input_size)?;
    let probs = skinnet.predict(&crop)?;
    Ok((paste_mask(&binarize(&probs)?, &window, h, w), Some(window)))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Segmentation {
    pub mask: Mask,
    /// Highest-scoring detection, in the input image's coordinates.
    pub detection: Option<Detection>,
    /// Integer crop window the mask was predicted in.
    pub window: Option<BBox>,
}

/// Full inference: detect, crop the top detection with a margin, segment
/// and paste back. An image without detections yields an empty mask.
pub fn segment_full(
    image: &Tensor,
    detector: &Detector,
    skinnet: &SkinNet,
) -> Result<Segmentation> {
    let (h, w, _) = image.dims3()?;
    let Some(detection) = detect_top(image, detector)? else {
        return Ok(Segmentation {
            mask: Mask::zeros(h, w),
            detection: None,
            window: None,
        });
    };
    let (mask, window) = segment_box(image, skinnet, &detection.bbox)?;
    Ok(Segmentation {
        mask,
        detection: Some(detection),
        window,
    })
}

/// Detections for an image of any size, mapped back to its coordinates.
pub fn detect_any_size(image: &Tensor, detector: &Detector) -> Result<Vec<Detection>> {
    let (h, w, _) = image.dims3()?;
    let n = detector.config.input_size;
    if (h, w) == (n, n) {
        return detector.detect(image);
    }
    let resized = resize_image(image, n, n)?;
    let (sy, sx) = (h as f64 / n as f64, w as f64 / n as f64);
    Ok(detector
        .detect(&resized)?
        .into_iter()
        .map(|d| Detection {
            bbox: BBox {
                x1: d.bbox.x1 * sx,
                y1: d.bbox.y1 * sy,
                x2: d.bbox.x2 * sx,
                y2: d.bbox.y2 * sy,
            },
            probs: d.probs,
        })
        .collect())
}

fn detect_top(image: &Tensor, detector: &Detector) -> Result<Option<Detection>> {
    Ok(detect_any_size(image, detector)?.into_iter().next())
}

/// Detection quality for one image with a non-empty ground truth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionScore {
    pub id: String,
    /// Highest IoU of any kept detection with the ground truth.
    pub best_iou: f64,
    /// IoU of the highest-scoring detection.
    pub top_iou: f64,
    pub detections: usize,
}

pub fn score_detections(
    detector: &Detector,
    samples: &[LabeledSample],
) -> Result<Vec<DetectionScore>> {
    let mut out = Vec::new();
    for s in samples {
        let Some(gt) = s.gt_box else {
            log::warn!("skipping {}: empty ground-truth mask", s.id);
            continue;
        };
        let dets = detect_any_size(&s.image, detector)?;
        let ious = dets
            .iter()
            .map(|d| iou(&d.bbox, &gt))
            .collect::<Result<Vec<_>>>()?;
        out.push(DetectionScore {
            id: s.id.clone(),
            best_iou: ious.iter().copied().fold(0.0, f64::max),
            top_iou: ious.first().copied().unwrap_or(0.0),
            detections: dets.len(),
        });
    }
    Ok(out)
}

/// Metrics of SkinNet applied to ground-truth boxes.
pub fn evaluate_gt_crops(
    skinnet: &SkinNet,
    samples: &[LabeledSample],
) -> Result<Vec<MetricsReport>> {
    samples
        .iter()
        .filter_map(|s| s.gt_box.map(|b| (s, b)))
        .map(|(s, b)| {
            let (mask, _) = segment_box(&s.image, skinnet, &b)?;
            compute_metrics(&mask, &s.mask)
        })
        .collect()
}

/// Metrics of the full detect-then-segment pipeline.
pub fn evaluate_pipeline(
    detector: &Detector,
    skinnet: &SkinNet,
    samples: &[LabeledSample],
) -> Result<Vec<MetricsReport>> {
    samples
        .iter()
        .map(|s| compute_metrics(&segment_full(&s.image, detector, skinnet)?.mask, &s.mask))
        .collect()
}
