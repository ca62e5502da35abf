//! Box algebra: IoU, anchors, mask-derived boxes, box regression coding and
//! non-maximum suppression.
//!
//! Boxes are half-open `[x1, x2) x [y1, y2)` rectangles in image pixels.

use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Error, Result};
use crate::mask::Mask;

/// Log-space width/height offsets are clamped to this magnitude on decode.
pub const MAX_LOG_SCALE: f64 = 10.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let b = BBox { x1, y1, x2, y2 };
        if !b.is_valid() {
            return arg_err(format!("degenerate box ({x1}, {y1}, {x2}, {y2})"));
        }
        Ok(b)
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        Self::new(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)
    }

    pub fn is_valid(&self) -> bool {
        [self.x1, self.y1, self.x2, self.y2]
            .iter()
            .all(|v| v.is_finite())
            && self.x1 < self.x2
            && self.y1 < self.y2
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let w = (self.x2.min(other.x2) - self.x1.max(other.x1)).max(0.0);
        let h = (self.y2.min(other.y2) - self.y1.max(other.y1)).max(0.0);
        w * h
    }

    /// Intersection with `[0, width] x [0, height]`, or `None` if empty.
    pub fn clip(&self, width: f64, height: f64) -> Option<BBox> {
        let b = BBox {
            x1: self.x1.clamp(0.0, width),
            y1: self.y1.clamp(0.0, height),
            x2: self.x2.clamp(0.0, width),
            y2: self.y2.clamp(0.0, height),
        };
        b.is_valid().then_some(b)
    }

    /// Grows each side by `fraction` of the box extent, then clips.
    pub fn expand(&self, fraction: f64, width: f64, height: f64) -> Option<BBox> {
        let (dx, dy) = (self.width() * fraction, self.height() * fraction);
        BBox {
            x1: self.x1 - dx,
            y1: self.y1 - dy,
            x2: self.x2 + dx,
            y2: self.y2 + dy,
        }
        .clip(width, height)
    }

    /// Smallest integer-aligned box containing this one.
    pub fn round_out(&self) -> BBox {
        BBox {
            x1: self.x1.floor(),
            y1: self.y1.floor(),
            x2: self.x2.ceil(),
            y2: self.y2.ceil(),
        }
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x1 && x < self.x2 && y >= self.y1 && y < self.y2
    }
}

pub fn iou(a: &BBox, b: &BBox) -> Result<f64> {
    if !a.is_valid() || !b.is_valid() {
        return arg_err("iou of a degenerate box");
    }
    Ok(iou_unchecked(a, b))
}

pub(crate) fn iou_unchecked(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    if inter == 0.0 {
        return 0.0;
    }
    inter / (a.area() + b.area() - inter)
}

/// Tight half-open box around the foreground of `mask`.
pub fn mask_to_bbox(mask: &Mask) -> Result<BBox> {
    let (mut r0, mut r1, mut c0, mut c1) = (usize::MAX, 0, usize::MAX, 0);
    for r in 0..mask.height() {
        for c in 0..mask.width() {
            if mask.get(r, c) {
                r0 = r0.min(r);
                r1 = r1.max(r);
                c0 = c0.min(c);
                c1 = c1.max(c);
            }
        }
    }
    if r0 == usize::MAX {
        return Err(Error::EmptyMask);
    }
    BBox::new(c0 as f64, r0 as f64, (c1 + 1) as f64, (r1 + 1) as f64)
}

/// Width:height aspect ratio of an anchor.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AspectRatio {
    pub w: f64,
    pub h: f64,
}

impl AspectRatio {
    pub const fn new(w: f64, h: f64) -> Self {
        AspectRatio { w, h }
    }

    /// Anchor extents with area `scale^2` and this aspect.
    pub fn extents(&self, scale: f64) -> (f64, f64) {
        let r = (self.w / self.h).sqrt();
        (scale * r, scale / r)
    }
}

pub const DEFAULT_SCALES: [f64; 3] = [128.0, 256.0, 512.0];
pub const DEFAULT_RATIOS: [AspectRatio; 3] = [
    AspectRatio::new(1.0, 1.0),
    AspectRatio::new(1.0, 2.0),
    AspectRatio::new(2.0, 1.0),
];
/// Input size the anchor scales above refer to.
pub const DEFAULT_INPUT_SIZE: usize = 512;
/// Anchors sit at the centres of non-overlapping patches of this many cells.
pub const ANCHOR_PATCH: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Anchor {
    pub bbox: BBox,
    pub scale_index: usize,
    pub ratio_index: usize,
    pub grid_row: usize,
    pub grid_col: usize,
}

impl Anchor {
    /// Index of this anchor's (scale, ratio) type.
    pub fn type_index(&self, n_ratios: usize) -> usize {
        self.scale_index * n_ratios + self.ratio_index
    }
}

/// Anchor-grid extents for a feature map.
pub fn anchor_grid(fm_h: usize, fm_w: usize) -> Result<(usize, usize)> {
    if fm_h < ANCHOR_PATCH || fm_w < ANCHOR_PATCH {
        return arg_err(format!(
            "{fm_h}x{fm_w} feature map is smaller than one {ANCHOR_PATCH}x{ANCHOR_PATCH} patch"
        ));
    }
    Ok((fm_h / ANCHOR_PATCH, fm_w / ANCHOR_PATCH))
}

/// Anchors centred on the non-overlapping 3x3 patches of an `fm_h x fm_w`
/// feature map. Ordered by grid row, grid column, scale, ratio.
pub fn generate_anchors(
    fm_h: usize,
    fm_w: usize,
    backbone_stride: usize,
    scales: &[f64],
    ratios: &[AspectRatio],
) -> Result<Vec<Anchor>> {
    let (gh, gw) = anchor_grid(fm_h, fm_w)?;
    if scales.is_empty() || ratios.is_empty() {
        return arg_err("anchor scales and ratios must be non-empty");
    }
    let stride = backbone_stride as f64;
    let half = ANCHOR_PATCH as f64 / 2.0;
    let mut anchors = Vec::with_capacity(gh * gw * scales.len() * ratios.len());
    for gr in 0..gh {
        for gc in 0..gw {
            let cy = ((gr * ANCHOR_PATCH) as f64 + half) * stride;
            let cx = ((gc * ANCHOR_PATCH) as f64 + half) * stride;
            for (si, &s) in scales.iter().enumerate() {
                for (ri, ratio) in ratios.iter().enumerate() {
                    let (w, h) = ratio.extents(s);
                    anchors.push(Anchor {
                        bbox: BBox::from_center(cx, cy, w, h)?,
                        scale_index: si,
                        ratio_index: ri,
                        grid_row: gr,
                        grid_col: gc,
                    });
                }
            }
        }
    }
    Ok(anchors)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RegressionTarget {
    pub tx: f64,
    pub ty: f64,
    pub tw: f64,
    pub th: f64,
}

impl RegressionTarget {
    pub fn to_array(self) -> [f64; 4] {
        [self.tx, self.ty, self.tw, self.th]
    }

    pub fn from_slice(v: &[f64]) -> Self {
        RegressionTarget {
            tx: v[0],
            ty: v[1],
            tw: v[2],
            th: v[3],
        }
    }
}

/// Centre offsets normalized by the anchor extent and log extent ratios.
pub fn encode_box(anchor: &BBox, gt: &BBox) -> RegressionTarget {
    let (acx, acy) = anchor.center();
    let (gcx, gcy) = gt.center();
    RegressionTarget {
        tx: (gcx - acx) / anchor.width(),
        ty: (gcy - acy) / anchor.height(),
        tw: (gt.width() / anchor.width()).ln(),
        th: (gt.height() / anchor.height()).ln(),
    }
}

/// Inverse of [`encode_box`], clipped to the image. `None` when clipping
/// leaves nothing.
pub fn decode_box(anchor: &BBox, t: &RegressionTarget, image_h: f64, image_w: f64) -> Option<BBox> {
    let (acx, acy) = anchor.center();
    let cx = acx + t.tx * anchor.width();
    let cy = acy + t.ty * anchor.height();
    let w = anchor.width() * t.tw.clamp(-MAX_LOG_SCALE, MAX_LOG_SCALE).exp();
    let h = anchor.height() * t.th.clamp(-MAX_LOG_SCALE, MAX_LOG_SCALE).exp();
    BBox {
        x1: cx - 0.5 * w,
        y1: cy - 0.5 * h,
        x2: cx + 0.5 * w,
        y2: cy + 0.5 * h,
    }
    .clip(image_w, image_h)
}

/// How box regression outputs are parameterized.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BoxCoding {
    /// `(tx, ty, tw, th)` relative to the reference box.
    #[default]
    Offsets,
    /// Corner coordinates normalized by the image extent, ignoring the
    /// reference box.
    RawCoordinates,
}

impl BoxCoding {
    pub fn encode(
        &self,
        reference: &BBox,
        gt: &BBox,
        image_h: f64,
        image_w: f64,
    ) -> RegressionTarget {
        match self {
            BoxCoding::Offsets => encode_box(reference, gt),
            BoxCoding::RawCoordinates => RegressionTarget {
                tx: gt.x1 / image_w,
                ty: gt.y1 / image_h,
                tw: gt.x2 / image_w,
                th: gt.y2 / image_h,
            },
        }
    }

    pub fn decode(
        &self,
        reference: &BBox,
        t: &RegressionTarget,
        image_h: f64,
        image_w: f64,
    ) -> Option<BBox> {
        match self {
            BoxCoding::Offsets => decode_box(reference, t, image_h, image_w),
            BoxCoding::RawCoordinates => BBox {
                x1: t.tx * image_w,
                y1: t.ty * image_h,
                x2: t.tw * image_w,
                y2: t.th * image_h,
            }
            .clip(image_w, image_h),
        }
    }
}

/// Greedy non-maximum suppression. Returns kept indices in selection order;
/// equal scores are visited in index order.
pub fn nms(boxes: &[BBox], scores: &[f64], threshold: f64) -> Result<Vec<usize>> {
    if !(0.0..=1.0).contains(&threshold) {
        return arg_err(format!("nms threshold {threshold} outside [0, 1]"));
    }
    if boxes.len() != scores.len() {
        return arg_err(format!("{} boxes but {} scores", boxes.len(), scores.len()));
    }
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut suppressed = vec![false; boxes.len()];
    let mut keep = Vec::new();
    for (pos, &i) in order.iter().enumerate() {
        if suppressed[i] {
            continue;
        }
        keep.push(i);
        for &j in &order[pos + 1..] {
            if !suppressed[j] && iou(&boxes[i], &boxes[j])? > threshold {
                suppressed[j] = true;
            }
        }
    }
    Ok(keep)
}
