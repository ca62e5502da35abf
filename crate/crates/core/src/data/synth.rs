use std::collections::VecDeque;
use std::f64::consts::PI;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::dataset::LabeledSample;
use crate::error::{arg_err, Result};
use crate::mask::Mask;
use crate::tensor::Tensor;

const MIN_SIZE: usize = 32;
const AREA_RANGE: (f64, f64) = (0.02, 0.30);
const HARMONICS: usize = 5;

/// Generate `n` synthetic dermoscopy-like images of side `size` with one
/// lesion each. Identical arguments give identical output.
pub fn synth_generate(n: usize, seed: u64, size: usize) -> Result<Vec<LabeledSample>> {
    (0..n).map(|i| synth_sample(i, seed, size)).collect()
}

/// The `index`-th sample of the stream for `seed`, independent of the others.
pub fn synth_sample(index: usize, seed: u64, size: usize) -> Result<LabeledSample> {
    if size < MIN_SIZE {
        return arg_err(format!(
            "synthetic images need side >= {MIN_SIZE}, got {size}"
        ));
    }
    let stream = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (index as u64).wrapping_add(1);
    let mut rng = ChaCha8Rng::seed_from_u64(stream);
    let mask = loop {
        let mask = largest_component(&lesion_shape(size, &mut rng));
        let frac = mask.count() as f64 / (size * size) as f64;
        if (AREA_RANGE.0..=AREA_RANGE.1).contains(&frac) {
            break mask;
        }
    };
    let image = paint(&mask, &mut rng);
    LabeledSample::new(format!("synth_{index:05}"), image, mask)
}

/// Star-shaped blob: an ellipse whose radius is modulated by low harmonics.
fn lesion_shape(size: usize, rng: &mut ChaCha8Rng) -> Mask {
    let s = size as f64;
    let cx = rng.gen_range(0.3..0.7) * s;
    let cy = rng.gen_range(0.3..0.7) * s;
    let frac = rng.gen_range(0.03..0.22);
    let r0 = (frac * s * s / PI).sqrt();
    let elong: f64 = rng.gen_range(0.75..1.33);
    let (ra, rb) = (r0 * elong, r0 / elong);
    let tilt = rng.gen_range(0.0..PI);
    let harmonics: Vec<(f64, f64)> = (2..2 + HARMONICS)
        .map(|_| (rng.gen_range(0.0..0.07), rng.gen_range(0.0..2.0 * PI)))
        .collect();
    Mask::from_fn(size, size, |r, c| {
        let dx = c as f64 + 0.5 - cx;
        let dy = r as f64 + 0.5 - cy;
        let (sin, cos) = tilt.sin_cos();
        let u = dx * cos + dy * sin;
        let v = -dx * sin + dy * cos;
        let phi = v.atan2(u);
        let wobble: f64 = harmonics
            .iter()
            .enumerate()
            .map(|(k, &(amp, phase))| amp * ((k + 2) as f64 * phi + phase).cos())
            .sum();
        let scale = 1.0 + wobble;
        (u / (ra * scale)).powi(2) + (v / (rb * scale)).powi(2) < 1.0
    })
}

/// Keep the largest 4-connected foreground component.
fn largest_component(mask: &Mask) -> Mask {
    let (h, w) = (mask.height(), mask.width());
    let mut label = vec![0usize; h * w];
    let mut best = (0, 0);
    let mut next = 0;
    let mut queue = VecDeque::new();
    for start in 0..h * w {
        if label[start] != 0 || !mask.get(start / w, start % w) {
            continue;
        }
        next += 1;
        label[start] = next;
        queue.push_back(start);
        let mut size = 0;
        while let Some(p) = queue.pop_front() {
            size += 1;
            let (r, c) = (p / w, p % w);
            let neighbours = [
                (r > 0).then(|| p - w),
                (r + 1 < h).then(|| p + w),
                (c > 0).then(|| p - 1),
                (c + 1 < w).then(|| p + 1),
            ];
            for q in neighbours.into_iter().flatten() {
                if label[q] == 0 && mask.get(q / w, q % w) {
                    label[q] = next;
                    queue.push_back(q);
                }
            }
        }
        if size > best.1 {
            best = (next, size);
        }
    }
    Mask::from_fn(h, w, |r, c| best.0 != 0 && label[r * w + c] == best.0)
}

fn paint(mask: &Mask, rng: &mut ChaCha8Rng) -> Tensor {
    let (h, w) = (mask.height(), mask.width());
    let skin = [
        rng.gen_range(0.78..0.92),
        rng.gen_range(0.58..0.72),
        rng.gen_range(0.48..0.62),
    ];
    let darkness = rng.gen_range(0.35..0.6);
    let lesion = [
        skin[0] * darkness + rng.gen_range(-0.04..0.04),
        skin[1] * darkness * 0.8,
        skin[2] * darkness * 0.75,
    ];
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.gen_range(0.02..0.05),
                rng.gen_range(0.02..0.15),
                rng.gen_range(0.0..2.0 * PI),
                rng.gen_range(0.0..PI),
            )
        })
        .collect();
    let mottle_phase = rng.gen_range(0.0..2.0 * PI);
    let edge = edge_weight(mask);
    let mut data = Vec::with_capacity(h * w * 3);
    for r in 0..h {
        for c in 0..w {
            let texture: f64 = waves
                .iter()
                .map(|&(amp, freq, phase, dir)| {
                    amp * ((c as f64 * dir.cos() + r as f64 * dir.sin()) * freq + phase).sin()
                })
                .sum();
            let mottle = 0.05 * ((c as f64 * 0.31 + mottle_phase).sin() * (r as f64 * 0.27).cos());
            let t = edge[r * w + c];
            for ch in 0..3 {
                let base = skin[ch] + texture;
                let inner = lesion[ch] + mottle;
                let noise = rng.gen_range(-0.03..0.03);
                data.push((base * (1.0 - t) + inner * t + noise).clamp(0.0, 1.0));
            }
        }
    }
    Tensor::new(vec![h, w, 3], data).expect("consistent extents")
}

/// Lesion weight per pixel, softened to 0.5 along the mask boundary.
fn edge_weight(mask: &Mask) -> Vec<f64> {
    let (h, w) = (mask.height(), mask.width());
    let mut out = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            if !mask.get(r, c) {
                continue;
            }
            let boundary = r == 0
                || c == 0
                || r + 1 == h
                || c + 1 == w
                || !mask.get(r - 1, c)
                || !mask.get(r + 1, c)
                || !mask.get(r, c - 1)
                || !mask.get(r, c + 1);
            out[r * w + c] = if boundary { 0.7 } else { 1.0 };
        }
    }
    out
}
