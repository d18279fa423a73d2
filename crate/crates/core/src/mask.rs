//! Binary validity grids and their pooled update.

use crate::autodiff::kernels::{self, Planes, Window};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Per-cell status: 0 valid (known pixel), 1 invalid (hole).
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct MaskMetric {
    height: usize,
    width: usize,
    cells: Vec<u8>,
}

impl MaskMetric {
    pub fn new(height: usize, width: usize, cells: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 || cells.len() != height * width {
            return Err(Error::Contract(format!(
                "mask of {height}x{width} needs {} cells, got {}",
                height * width,
                cells.len()
            )));
        }
        if cells.iter().any(|&c| c > 1) {
            return Err(Error::Contract("mask cells must be 0 or 1".into()));
        }
        Ok(Self { height, width, cells })
    }

    pub fn valid(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            cells: vec![0; height * width],
        }
    }

    pub fn invalid(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            cells: vec![1; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn cells(&self) -> &[u8] {
        &self.cells
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.cells[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.cells[y * self.width + x] = v as u8;
    }

    pub fn is_invalid(&self) -> Vec<bool> {
        self.cells.iter().map(|&c| c == 1).collect()
    }

    pub fn invalid_count(&self) -> usize {
        self.cells.iter().filter(|&&c| c == 1).count()
    }

    pub fn invalid_fraction(&self) -> f64 {
        self.invalid_count() as f64 / self.cells.len() as f64
    }

    /// `M` broadcast over `channels` planes.
    pub fn hole_tensor(&self, channels: usize) -> Tensor {
        self.plane_tensor(channels, |c| c as f64)
    }

    /// `1 - M` broadcast over `channels` planes.
    pub fn keep_tensor(&self, channels: usize) -> Tensor {
        self.plane_tensor(channels, |c| 1.0 - c as f64)
    }

    fn plane_tensor(&self, channels: usize, f: impl Fn(u8) -> f64) -> Tensor {
        let area = self.cells.len();
        Tensor::from_fn(&[channels, self.height, self.width], |i| f(self.cells[i % area]))
    }

    /// Min-pool over the window geometry: a cell is valid iff its receptive
    /// field holds at least one valid cell. Padding counts as invalid.
    pub fn update(&self, kernel: usize, stride: usize, padding: usize) -> Result<MaskMetric> {
        if kernel == 0 || stride == 0 {
            return Err(Error::Param {
                op: "mask_update",
                detail: format!("kernel {kernel} and stride {stride} must be >= 1"),
            });
        }
        let win = Window::new(kernel, stride, padding);
        let (Some(oh), Some(ow)) = (win.output_len(self.height), win.output_len(self.width)) else {
            return Err(Error::Contract(format!(
                "pooling window {kernel}/{stride}/{padding} does not fit a {}x{} mask",
                self.height, self.width
            )));
        };
        let neg: Vec<f64> = self.cells.iter().map(|&c| -(c as f64)).collect();
        let planes = Planes {
            channels: 1,
            height: self.height,
            width: self.width,
        };
        let (vals, _) = kernels::max_pool2d(&neg, planes, win, oh, ow);
        // A window lying wholly in padding yields -inf, i.e. invalid.
        let cells = vals.iter().map(|&v| if v == 0.0 { 0 } else { 1 }).collect();
        Ok(MaskMetric {
            height: oh,
            width: ow,
            cells,
        })
    }
}
