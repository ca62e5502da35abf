//! Forward and backward kernels on raw HWC buffers.
//!
//! The graph in [`super::graph`] owns shape checking; these functions assume
//! consistent extents.

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl Conv2dSpec {
    pub fn same(dilation: usize) -> Self {
        Conv2dSpec {
            stride: 1,
            padding: dilation,
            dilation,
        }
    }

    /// Output extent along one axis, or `None` when no kernel placement fits.
    pub fn out_extent(&self, input: usize, k: usize) -> Option<usize> {
        let span = self.dilation * (k - 1) + 1;
        let padded = input + 2 * self.padding;
        if padded < span || self.stride == 0 {
            return None;
        }
        Some((padded - span) / self.stride + 1)
    }
}

pub struct ConvDims {
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub kh: usize,
    pub kw: usize,
    pub cout: usize,
    pub oh: usize,
    pub ow: usize,
}

#[inline]
fn tap(o: usize, k: usize, spec: &Conv2dSpec, limit: usize) -> Option<usize> {
    let pos = (o * spec.stride + k * spec.dilation) as isize - spec.padding as isize;
    if pos < 0 || pos as usize >= limit {
        None
    } else {
        Some(pos as usize)
    }
}

pub fn conv2d_forward(
    input: &[f64],
    kernel: &[f64],
    bias: &[f64],
    d: &ConvDims,
    spec: &Conv2dSpec,
) -> Vec<f64> {
    let mut out = vec![0.0; d.oh * d.ow * d.cout];
    for oy in 0..d.oh {
        for ox in 0..d.ow {
            let o = &mut out[(oy * d.ow + ox) * d.cout..][..d.cout];
            o.copy_from_slice(bias);
            for ky in 0..d.kh {
                let Some(iy) = tap(oy, ky, spec, d.h) else {
                    continue;
                };
                for kx in 0..d.kw {
                    let Some(ix) = tap(ox, kx, spec, d.w) else {
                        continue;
                    };
                    let inp = &input[(iy * d.w + ix) * d.cin..][..d.cin];
                    let kbase = (ky * d.kw + kx) * d.cin * d.cout;
                    for (ci, &a) in inp.iter().enumerate() {
                        if a == 0.0 {
                            continue;
                        }
                        let krow = &kernel[kbase + ci * d.cout..][..d.cout];
                        for (acc, &k) in o.iter_mut().zip(krow) {
                            *acc += a * k;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Gradients of a convolution with respect to input, kernel and bias.
pub fn conv2d_backward(
    input: &[f64],
    kernel: &[f64],
    grad_out: &[f64],
    d: &ConvDims,
    spec: &Conv2dSpec,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut gin = vec![0.0; input.len()];
    let mut gk = vec![0.0; kernel.len()];
    let mut gb = vec![0.0; d.cout];
    for oy in 0..d.oh {
        for ox in 0..d.ow {
            let g = &grad_out[(oy * d.ow + ox) * d.cout..][..d.cout];
            if g.iter().all(|&v| v == 0.0) {
                continue;
            }
            for (b, &gv) in gb.iter_mut().zip(g) {
                *b += gv;
            }
            for ky in 0..d.kh {
                let Some(iy) = tap(oy, ky, spec, d.h) else {
                    continue;
                };
                for kx in 0..d.kw {
                    let Some(ix) = tap(ox, kx, spec, d.w) else {
                        continue;
                    };
                    let ibase = (iy * d.w + ix) * d.cin;
                    let kbase = (ky * d.kw + kx) * d.cin * d.cout;
                    for ci in 0..d.cin {
                        let krow = &kernel[kbase + ci * d.cout..][..d.cout];
                        let dot: f64 = krow.iter().zip(g).map(|(k, gv)| k * gv).sum();
                        gin[ibase + ci] += dot;
                        let a = input[ibase + ci];
                        if a != 0.0 {
                            let gkrow = &mut gk[kbase + ci * d.cout..][..d.cout];
                            for (acc, &gv) in gkrow.iter_mut().zip(g) {
                                *acc += a * gv;
                            }
                        }
                    }
                }
            }
        }
    }
    (gin, gk, gb)
}

/// Windowed max. Returns the pooled values and, per output element, the flat
/// input index of the winning element (first maximum in row-major order).
pub fn maxpool_forward(
    input: &[f64],
    (h, w, c): (usize, usize, usize),
    window: usize,
    stride: usize,
) -> (Vec<f64>, Vec<usize>, usize, usize) {
    let oh = (h - window) / stride + 1;
    let ow = (w - window) / stride + 1;
    let mut out = vec![f64::NEG_INFINITY; oh * ow * c];
    let mut arg = vec![0usize; oh * ow * c];
    for oy in 0..oh {
        for ox in 0..ow {
            let obase = (oy * ow + ox) * c;
            for wy in 0..window {
                for wx in 0..window {
                    let ibase = ((oy * stride + wy) * w + ox * stride + wx) * c;
                    for ch in 0..c {
                        let v = input[ibase + ch];
                        if v > out[obase + ch] || (wy == 0 && wx == 0) {
                            out[obase + ch] = v;
                            arg[obase + ch] = ibase + ch;
                        }
                    }
                }
            }
        }
    }
    (out, arg, oh, ow)
}

/// Bilinear sampling at the separable grid `ys x xs` (index-space coordinates,
/// clamped to the input extent).
pub fn resample_forward(
    input: &[f64],
    (h, w, c): (usize, usize, usize),
    ys: &[f64],
    xs: &[f64],
) -> Vec<f64> {
    let mut out = vec![0.0; ys.len() * xs.len() * c];
    let xt: Vec<_> = xs.iter().map(|&x| lerp_taps(x, w)).collect();
    for (i, &y) in ys.iter().enumerate() {
        let (y0, y1, fy) = lerp_taps(y, h);
        for (j, &(x0, x1, fx)) in xt.iter().enumerate() {
            let o = &mut out[(i * xs.len() + j) * c..][..c];
            let a = &input[(y0 * w + x0) * c..][..c];
            let b = &input[(y0 * w + x1) * c..][..c];
            let cc = &input[(y1 * w + x0) * c..][..c];
            let dd = &input[(y1 * w + x1) * c..][..c];
            for ch in 0..c {
                let top = a[ch] + fx * (b[ch] - a[ch]);
                let bottom = cc[ch] + fx * (dd[ch] - cc[ch]);
                o[ch] = top + fy * (bottom - top);
            }
        }
    }
    out
}

pub fn resample_backward(
    grad_out: &[f64],
    (h, w, c): (usize, usize, usize),
    ys: &[f64],
    xs: &[f64],
) -> Vec<f64> {
    let mut gin = vec![0.0; h * w * c];
    let xt: Vec<_> = xs.iter().map(|&x| lerp_taps(x, w)).collect();
    for (i, &y) in ys.iter().enumerate() {
        let (y0, y1, fy) = lerp_taps(y, h);
        for (j, &(x0, x1, fx)) in xt.iter().enumerate() {
            let g = &grad_out[(i * xs.len() + j) * c..][..c];
            let weights = [
                ((y0 * w + x0) * c, (1.0 - fy) * (1.0 - fx)),
                ((y0 * w + x1) * c, (1.0 - fy) * fx),
                ((y1 * w + x0) * c, fy * (1.0 - fx)),
                ((y1 * w + x1) * c, fy * fx),
            ];
            for (base, wgt) in weights {
                if wgt == 0.0 {
                    continue;
                }
                for ch in 0..c {
                    gin[base + ch] += wgt * g[ch];
                }
            }
        }
    }
    gin
}

#[inline]
fn lerp_taps(pos: f64, extent: usize) -> (usize, usize, f64) {
    let max = (extent - 1) as f64;
    let p = pos.clamp(0.0, max);
    let p0 = p.floor();
    let i0 = p0 as usize;
    if i0 + 1 >= extent {
        (i0, i0, 0.0)
    } else {
        (i0, i0 + 1, p - p0)
    }
}

/// Align-corners sample coordinates for resizing an axis of `input` cells to
/// `output` cells.
pub fn align_corners_coords(input: usize, output: usize) -> Vec<f64> {
    if output == 1 {
        return vec![0.0];
    }
    let step = (input as f64 - 1.0) / (output as f64 - 1.0);
    (0..output).map(|i| i as f64 * step).collect()
}

/// Align-corners coordinates spanning `[lo, hi]` in index space.
pub fn span_coords(lo: f64, hi: f64, output: usize) -> Vec<f64> {
    if output == 1 {
        return vec![0.5 * (lo + hi)];
    }
    let step = (hi - lo) / (output as f64 - 1.0);
    (0..output).map(|i| lo + i as f64 * step).collect()
}
