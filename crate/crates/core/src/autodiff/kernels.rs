//! Direct-loop numeric kernels shared by the forward pass, the plain
//! backward pass, and the graph-building backward pass.

/// Window geometry of a square 2-D convolution or pooling.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Window {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Window {
    pub const fn new(kernel: usize, stride: usize, padding: usize) -> Self {
        Self {
            kernel,
            stride,
            padding,
        }
    }

    /// Output extent for an input extent, or `None` when the window does not fit.
    pub fn output_len(&self, input: usize) -> Option<usize> {
        if self.kernel == 0 || self.stride == 0 || input + 2 * self.padding < self.kernel {
            return None;
        }
        Some((input + 2 * self.padding - self.kernel) / self.stride + 1)
    }

    /// Range of output indices `o` whose tap `t` lands inside `[0, input)`.
    #[inline]
    fn valid_outputs(&self, tap: usize, input: usize, output: usize) -> (usize, usize) {
        let (s, p) = (self.stride as isize, self.padding as isize);
        let t = tap as isize;
        // o*s + t - p >= 0  and  o*s + t - p <= input - 1
        let lo = (p - t + s - 1).div_euclid(s).max(0);
        let hi = (input as isize - 1 + p - t).div_euclid(s).min(output as isize - 1);
        if hi < lo {
            (0, 0)
        } else {
            (lo as usize, hi as usize + 1)
        }
    }
}

/// Spatial dimensions of a `[C, H, W]` activation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Planes {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Planes {
    pub fn area(&self) -> usize {
        self.height * self.width
    }
}

/// `out[co] = bias[co] + sum_ci weight[co, ci] (*) x[ci]`.
pub fn conv2d(
    x: &[f64],
    input: Planes,
    weight: &[f64],
    out_channels: usize,
    bias: Option<&[f64]>,
    win: Window,
    out_h: usize,
    out_w: usize,
) -> Vec<f64> {
    let k = win.kernel;
    let (ih, iw) = (input.height, input.width);
    let mut out = vec![0.0; out_channels * out_h * out_w];
    for co in 0..out_channels {
        let plane = &mut out[co * out_h * out_w..(co + 1) * out_h * out_w];
        if let Some(b) = bias {
            plane.iter_mut().for_each(|v| *v = b[co]);
        }
        for ci in 0..input.channels {
            let xin = &x[ci * ih * iw..(ci + 1) * ih * iw];
            for ky in 0..k {
                let (oy0, oy1) = win.valid_outputs(ky, ih, out_h);
                for kx in 0..k {
                    let wv = weight[((co * input.channels + ci) * k + ky) * k + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let (ox0, ox1) = win.valid_outputs(kx, iw, out_w);
                    if ox1 <= ox0 {
                        continue;
                    }
                    for oy in oy0..oy1 {
                        let iy = oy * win.stride + ky - win.padding;
                        let orow = &mut plane[oy * out_w + ox0..oy * out_w + ox1];
                        let ix0 = ox0 * win.stride + kx - win.padding;
                        let irow = &xin[iy * iw..(iy + 1) * iw];
                        if win.stride == 1 {
                            let span = orow.len();
                            for (o, &i) in orow.iter_mut().zip(&irow[ix0..ix0 + span]) {
                                *o += wv * i;
                            }
                        } else {
                            for (j, o) in orow.iter_mut().enumerate() {
                                *o += wv * irow[ix0 + j * win.stride];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of [`conv2d`] with respect to its input.
pub fn conv2d_input_grad(
    grad_out: &[f64],
    out_h: usize,
    out_w: usize,
    weight: &[f64],
    out_channels: usize,
    input: Planes,
    win: Window,
) -> Vec<f64> {
    let k = win.kernel;
    let (ih, iw) = (input.height, input.width);
    let mut gx = vec![0.0; input.channels * ih * iw];
    for co in 0..out_channels {
        let gplane = &grad_out[co * out_h * out_w..(co + 1) * out_h * out_w];
        for ci in 0..input.channels {
            let gin = &mut gx[ci * ih * iw..(ci + 1) * ih * iw];
            for ky in 0..k {
                let (oy0, oy1) = win.valid_outputs(ky, ih, out_h);
                for kx in 0..k {
                    let wv = weight[((co * input.channels + ci) * k + ky) * k + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let (ox0, ox1) = win.valid_outputs(kx, iw, out_w);
                    if ox1 <= ox0 {
                        continue;
                    }
                    for oy in oy0..oy1 {
                        let iy = oy * win.stride + ky - win.padding;
                        let grow = &gplane[oy * out_w + ox0..oy * out_w + ox1];
                        let ix0 = ox0 * win.stride + kx - win.padding;
                        let irow = &mut gin[iy * iw..(iy + 1) * iw];
                        if win.stride == 1 {
                            for (i, &g) in irow[ix0..ix0 + grow.len()].iter_mut().zip(grow) {
                                *i += wv * g;
                            }
                        } else {
                            for (j, &g) in grow.iter().enumerate() {
                                irow[ix0 + j * win.stride] += wv * g;
                            }
                        }
                    }
                }
            }
        }
    }
    gx
}

/// Adjoint of [`conv2d`] with respect to its weight.
pub fn conv2d_weight_grad(
    x: &[f64],
    input: Planes,
    grad_out: &[f64],
    out_channels: usize,
    out_h: usize,
    out_w: usize,
    win: Window,
) -> Vec<f64> {
    let k = win.kernel;
    let (ih, iw) = (input.height, input.width);
    let mut gw = vec![0.0; out_channels * input.channels * k * k];
    for co in 0..out_channels {
        let gplane = &grad_out[co * out_h * out_w..(co + 1) * out_h * out_w];
        for ci in 0..input.channels {
            let xin = &x[ci * ih * iw..(ci + 1) * ih * iw];
            for ky in 0..k {
                let (oy0, oy1) = win.valid_outputs(ky, ih, out_h);
                for kx in 0..k {
                    let (ox0, ox1) = win.valid_outputs(kx, iw, out_w);
                    if ox1 <= ox0 {
                        continue;
                    }
                    let mut acc = 0.0;
                    for oy in oy0..oy1 {
                        let iy = oy * win.stride + ky - win.padding;
                        let grow = &gplane[oy * out_w + ox0..oy * out_w + ox1];
                        let ix0 = ox0 * win.stride + kx - win.padding;
                        let irow = &xin[iy * iw..(iy + 1) * iw];
                        if win.stride == 1 {
                            acc += grow
                                .iter()
                                .zip(&irow[ix0..ix0 + grow.len()])
                                .map(|(g, i)| g * i)
                                .sum::<f64>();
                        } else {
                            for (j, &g) in grow.iter().enumerate() {
                                acc += g * irow[ix0 + j * win.stride];
                            }
                        }
                    }
                    gw[((co * input.channels + ci) * k + ky) * k + kx] = acc;
                }
            }
        }
    }
    gw
}

/// Per-channel sum over the spatial axes.
pub fn channel_sum(x: &[f64], planes: Planes) -> Vec<f64> {
    x.chunks_exact(planes.area()).map(|p| p.iter().sum()).collect()
}

/// Max pooling with implicit `-inf` padding. Returns the pooled values and,
/// for each output, the flat input index that won (first in row-major
/// window order on ties). A window lying entirely in padding yields `-inf`
/// and `usize::MAX` as its index.
pub fn max_pool2d(
    x: &[f64],
    input: Planes,
    win: Window,
    out_h: usize,
    out_w: usize,
) -> (Vec<f64>, Vec<usize>) {
    let n = input.channels * out_h * out_w;
    let mut values = vec![f64::NEG_INFINITY; n];
    let mut argmax = vec![usize::MAX; n];
    for c in 0..input.channels {
        let base = c * input.area();
        for oy in 0..out_h {
            for ox in 0..out_w {
                let o = (c * out_h + oy) * out_w + ox;
                let (mut best, mut at) = (f64::NEG_INFINITY, usize::MAX);
                for ky in 0..win.kernel {
                    let iy = (oy * win.stride + ky) as isize - win.padding as isize;
                    if iy < 0 || iy >= input.height as isize {
                        continue;
                    }
                    for kx in 0..win.kernel {
                        let ix = (ox * win.stride + kx) as isize - win.padding as isize;
                        if ix < 0 || ix >= input.width as isize {
                            continue;
                        }
                        let idx = base + iy as usize * input.width + ix as usize;
                        if at == usize::MAX || x[idx] > best {
                            best = x[idx];
                            at = idx;
                        }
                    }
                }
                values[o] = best;
                argmax[o] = at;
            }
        }
    }
    (values, argmax)
}

/// Nearest-neighbour 2x upsampling of `[C, H, W]`.
pub fn upsample2x(x: &[f64], planes: Planes) -> Vec<f64> {
    let (h, w) = (planes.height, planes.width);
    let mut out = vec![0.0; planes.channels * 4 * h * w];
    for c in 0..planes.channels {
        for y in 0..2 * h {
            for xx in 0..2 * w {
                out[(c * 2 * h + y) * 2 * w + xx] = x[(c * h + y / 2) * w + xx / 2];
            }
        }
    }
    out
}

/// Adjoint of [`upsample2x`]: sums each 2x2 block. `planes` describes the
/// low-resolution side.
pub fn upsample2x_grad(g: &[f64], planes: Planes) -> Vec<f64> {
    let (h, w) = (planes.height, planes.width);
    let mut out = vec![0.0; planes.channels * h * w];
    for c in 0..planes.channels {
        for y in 0..2 * h {
            for xx in 0..2 * w {
                out[(c * h + y / 2) * w + xx / 2] += g[(c * 2 * h + y) * 2 * w + xx];
            }
        }
    }
    out
}

/// `a[r, k] @ b[k, c]`.
pub fn matmul(a: &[f64], b: &[f64], rows: usize, inner: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        let orow = &mut out[r * cols..(r + 1) * cols];
        for k in 0..inner {
            let av = a[r * inner + k];
            if av == 0.0 {
                continue;
            }
            for (o, &bv) in orow.iter_mut().zip(&b[k * cols..(k + 1) * cols]) {
                *o += av * bv;
            }
        }
    }
    out
}

pub fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

/// Splits a shape around `axis` into (outer, axis length, inner) extents.
pub fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}
