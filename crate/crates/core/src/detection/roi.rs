use crate::error::{arg_err, Result};
use crate::geometry::BBox;
use crate::tensor::kernels::span_coords;
use crate::tensor::{Graph, Var};

/// Extent of the bilinear crop before pooling.
pub const ROI_CROP: usize = 14;
/// Extent of the pooled feature after 2x2 max pooling.
pub const ROI_POOLED: usize = 7;

/// Index-space sample span covering `[lo, hi)` feature cells, align-corners:
/// first and last samples sit on the centres of the boundary cells.
fn cell_span(lo: f64, hi: f64) -> (f64, f64) {
    let (a, b) = (lo, hi - 1.0);
    if b < a {
        let c = 0.5 * (lo + hi) - 0.5;
        (c, c)
    } else {
        (a, b)
    }
}

/// Crops `box` (image pixels) out of a `[h, w, C]` feature map, resamples it
/// bilinearly to 14x14 and max-pools 2x2 to `[7, 7, C]`.
pub fn roi_pool(g: &mut Graph, features: Var, bbox: &BBox, backbone_stride: usize) -> Result<Var> {
    let crop = roi_crop(g, features, bbox, backbone_stride)?;
    g.maxpool2d(crop, 2, 2)
}

pub fn roi_crop(g: &mut Graph, features: Var, bbox: &BBox, backbone_stride: usize) -> Result<Var> {
    let (h, w, _) = g.value(features).dims3()?;
    let s = backbone_stride as f64;
    let (x1, y1, x2, y2) = (bbox.x1 / s, bbox.y1 / s, bbox.x2 / s, bbox.y2 / s);
    if !bbox.is_valid() || x1 < 0.0 || y1 < 0.0 || x2 > w as f64 || y2 > h as f64 {
        return arg_err(format!(
            "roi {bbox:?} falls outside the {h}x{w} feature map"
        ));
    }
    let (ya, yb) = cell_span(y1, y2);
    let (xa, xb) = cell_span(x1, x2);
    g.resample(
        features,
        span_coords(ya, yb, ROI_CROP),
        span_coords(xa, xb, ROI_CROP),
    )
}
