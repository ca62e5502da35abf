use crate::error::{arg_err, shape_err, Result};

/// Binary 2-D mask, row-major, values 0 or 1.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if height * width != data.len() {
            return shape_err(format!("{height}x{width} mask given {} values", data.len()));
        }
        if data.iter().any(|&v| v > 1) {
            return arg_err("mask values must be 0 or 1");
        }
        Ok(Mask {
            height,
            width,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Mask {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                data.push(f(r, c) as u8);
            }
        }
        Mask {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.data[row * self.width + col] != 0
    }

    pub fn set(&mut self, row: usize, col: usize, on: bool) {
        self.data[row * self.width + col] = on as u8;
    }

    pub fn count(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }

    /// Nearest-neighbour resize on the align-corners grid, so that the corner
    /// pixels map onto each other exactly as in bilinear image resampling.
    pub fn resize_nearest(&self, height: usize, width: usize) -> Mask {
        let rows: Vec<usize> = nearest_indices(self.height, height);
        let cols: Vec<usize> = nearest_indices(self.width, width);
        Mask::from_fn(height, width, |r, c| self.get(rows[r], cols[c]))
    }

    /// Two-channel one-hot encoding `[h, w, 2]` with channel 0 = background.
    pub fn one_hot(&self) -> crate::tensor::Tensor {
        let mut data = Vec::with_capacity(self.data.len() * 2);
        for &v in &self.data {
            if v == 0 {
                data.extend([1.0, 0.0]);
            } else {
                data.extend([0.0, 1.0]);
            }
        }
        crate::tensor::Tensor::new(vec![self.height, self.width, 2], data)
            .expect("consistent extents")
    }
}

fn nearest_indices(input: usize, output: usize) -> Vec<usize> {
    crate::tensor::kernels::align_corners_coords(input, output)
        .into_iter()
        .map(|x| (x.round() as usize).min(input - 1))
        .collect()
}
