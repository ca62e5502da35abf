//! Independent reference implementations used by the tests.

use lesion_core::geometry::BBox;

/// Direct cross-correlation `[h,w,cin] * [kh,kw,cin,cout] + bias`.
#[allow(clippy::too_many_arguments)]
pub fn naive_conv(
    x: &[f64],
    (h, w, cin): (usize, usize, usize),
    k: &[f64],
    (kh, kw, cout): (usize, usize, usize),
    bias: &[f64],
    stride: usize,
    pad: usize,
    dil: usize,
) -> (Vec<f64>, usize, usize) {
    let oh = (h + 2 * pad - dil * (kh - 1) - 1) / stride + 1;
    let ow = (w + 2 * pad - dil * (kw - 1) - 1) / stride + 1;
    let mut out = vec![0.0; oh * ow * cout];
    for oy in 0..oh {
        for ox in 0..ow {
            for co in 0..cout {
                let mut acc = bias[co];
                for ky in 0..kh {
                    for kx in 0..kw {
                        let iy = (oy * stride + ky * dil) as i64 - pad as i64;
                        let ix = (ox * stride + kx * dil) as i64 - pad as i64;
                        if iy < 0 || ix < 0 || iy >= h as i64 || ix >= w as i64 {
                            continue;
                        }
                        for ci in 0..cin {
                            acc += x[((iy as usize) * w + ix as usize) * cin + ci]
                                * k[((ky * kw + kx) * cin + ci) * cout + co];
                        }
                    }
                }
                out[(oy * ow + ox) * cout + co] = acc;
            }
        }
    }
    (out, oh, ow)
}

pub fn naive_maxpool(
    x: &[f64],
    (h, w, c): (usize, usize, usize),
    win: usize,
    stride: usize,
) -> Vec<f64> {
    let oh = (h - win) / stride + 1;
    let ow = (w - win) / stride + 1;
    let mut out = Vec::with_capacity(oh * ow * c);
    for oy in 0..oh {
        for ox in 0..ow {
            for ch in 0..c {
                let mut m = f64::NEG_INFINITY;
                for dy in 0..win {
                    for dx in 0..win {
                        m = m.max(x[((oy * stride + dy) * w + ox * stride + dx) * c + ch]);
                    }
                }
                out.push(m);
            }
        }
    }
    out
}

/// Bilinear sample of one channel at fractional `(y, x)`.
pub fn bilinear_at(x: &[f64], (h, w, c): (usize, usize, usize), y: f64, xx: f64, ch: usize) -> f64 {
    let y0 = y.floor().min((h - 1) as f64) as usize;
    let x0 = xx.floor().min((w - 1) as f64) as usize;
    let y1 = (y0 + 1).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let fy = y - y0 as f64;
    let fx = xx - x0 as f64;
    let v = |r: usize, col: usize| x[(r * w + col) * c + ch];
    v(y0, x0) * (1.0 - fy) * (1.0 - fx)
        + v(y0, x1) * (1.0 - fy) * fx
        + v(y1, x0) * fy * (1.0 - fx)
        + v(y1, x1) * fy * fx
}

/// IoU of integer-coordinate boxes by counting covered unit cells.
pub fn raster_iou(a: &BBox, b: &BBox) -> f64 {
    let lo_x = a.x1.min(b.x1) as i64;
    let hi_x = a.x2.max(b.x2) as i64;
    let lo_y = a.y1.min(b.y1) as i64;
    let hi_y = a.y2.max(b.y2) as i64;
    let (mut inter, mut union) = (0u64, 0u64);
    for y in lo_y..hi_y {
        for x in lo_x..hi_x {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let ina = a.contains(px, py);
            let inb = b.contains(px, py);
            inter += u64::from(ina && inb);
            union += u64::from(ina || inb);
        }
    }
    inter as f64 / union as f64
}

/// Greedy suppression by repeated arg-max over the remaining set.
pub fn brute_nms(boxes: &[BBox], scores: &[f64], thr: f64) -> Vec<usize> {
    let mut alive: Vec<bool> = vec![true; boxes.len()];
    let mut keep = Vec::new();
    loop {
        let mut best: Option<usize> = None;
        for i in 0..boxes.len() {
            if alive[i] && best.is_none_or(|b| scores[i] > scores[b]) {
                best = Some(i);
            }
        }
        let Some(b) = best else { break };
        keep.push(b);
        alive[b] = false;
        for j in 0..boxes.len() {
            if alive[j] && raster_free_iou(&boxes[b], &boxes[j]) > thr {
                alive[j] = false;
            }
        }
    }
    keep
}

/// Closed-form IoU written independently of the library.
pub fn raster_free_iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    let ua = (a.x2 - a.x1) * (a.y2 - a.y1) + (b.x2 - b.x1) * (b.y2 - b.y1) - inter;
    if inter == 0.0 {
        0.0
    } else {
        inter / ua
    }
}

/// Anchors on an `fm x fm` map: one set per non-overlapping 3x3 patch.
pub fn anchor_count(fm_h: usize, fm_w: usize, types: usize) -> usize {
    (fm_h / 3) * (fm_w / 3) * types
}
