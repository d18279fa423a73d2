use std::rc::Rc;

use super::kernels::{self, Planes, Window};
use super::{Op, Tape, Var};
use crate::error::{param_err, shape_err, Error, Result};
use crate::tensor::Tensor;

fn planes_of(op: &'static str, shape: &[usize]) -> Result<Planes> {
    match *shape {
        [c, h, w] => Ok(Planes {
            channels: c,
            height: h,
            width: w,
        }),
        _ => shape_err(op, format!("expected [C, H, W], got {shape:?}")),
    }
}

/// Output shape for an elementwise binary op allowing scalar broadcast.
fn broadcast_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<Vec<usize>> {
    if a.shape() == b.shape() || b.numel() == 1 {
        Ok(a.shape().to_vec())
    } else if a.numel() == 1 {
        Ok(b.shape().to_vec())
    } else {
        shape_err(
            op,
            format!("{:?} vs {:?} (only scalar broadcast is supported)", a.shape(), b.shape()),
        )
    }
}

fn zip_broadcast(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    let (ad, bd) = (a.data(), b.data());
    if ad.len() == bd.len() {
        ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect()
    } else if bd.len() == 1 {
        ad.iter().map(|&x| f(x, bd[0])).collect()
    } else {
        bd.iter().map(|&y| f(ad[0], y)).collect()
    }
}

impl<'t> Var<'t> {
    fn unary(&self, op: Op, f: impl Fn(f64) -> f64) -> Var<'t> {
        let x = self.value();
        let out = x.map(f);
        self.tape.push(op, vec![self.id], out, false)
    }

    fn binary(&self, other: Var<'t>, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var<'t>> {
        self.same_tape(&other)?;
        let (a, b) = (self.value(), other.value());
        let shape = broadcast_shape(op.name(), &a, &b)?;
        let out = Tensor::from_parts(shape, zip_broadcast(&a, &b, f));
        Ok(self.tape.push(op, vec![self.id, other.id], out, false))
    }

    pub fn add(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Op::Add, |a, b| a + b)
    }

    pub fn sub(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Op::Sub, |a, b| a - b)
    }

    pub fn mul(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Op::Mul, |a, b| a * b)
    }

    pub fn scale(&self, c: f64) -> Var<'t> {
        self.unary(Op::Scale(c), |x| c * x)
    }

    pub fn neg(&self) -> Var<'t> {
        self.scale(-1.0)
    }

    pub fn add_scalar(&self, c: f64) -> Var<'t> {
        self.unary(Op::AddScalar, |x| x + c)
    }

    pub fn relu(&self) -> Var<'t> {
        self.unary(Op::Relu, |x| if x > 0.0 { x } else { 0.0 })
    }

    pub fn leaky_relu(&self, slope: f64) -> Var<'t> {
        self.unary(Op::LeakyRelu(slope), |x| if x > 0.0 { x } else { slope * x })
    }

    pub fn tanh(&self) -> Var<'t> {
        self.unary(Op::Tanh, f64::tanh)
    }

    pub fn sigmoid(&self) -> Var<'t> {
        self.unary(Op::Sigmoid, sigmoid)
    }

    pub fn abs(&self) -> Var<'t> {
        self.unary(Op::Abs, f64::abs)
    }

    pub fn exp(&self) -> Var<'t> {
        self.unary(Op::Exp, f64::exp)
    }

    pub fn powf(&self, p: f64) -> Var<'t> {
        self.unary(Op::Pow(p), |x| x.powf(p))
    }

    /// Square root; the derivative at 0 is taken to be 0.
    pub fn sqrt(&self) -> Var<'t> {
        self.unary(Op::Sqrt, f64::sqrt)
    }

    pub(crate) fn half_recip(&self) -> Var<'t> {
        self.unary(Op::HalfRecip, |y| if y > 0.0 { 0.5 / y } else { 0.0 })
    }

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum(&self) -> Var<'t> {
        let x = self.value();
        let total = x.data().iter().sum();
        self.tape.push(Op::Sum, vec![self.id], Tensor::scalar(total), false)
    }

    pub fn mean(&self) -> Var<'t> {
        let n = self.numel() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Sum of squares.
    pub fn square_norm(&self) -> Var<'t> {
        self.powf(2.0).sum()
    }

    /// Sum along one axis; the axis is removed (a 1-D input yields `[1]`).
    pub fn sum_axis(&self, axis: usize) -> Result<Var<'t>> {
        let x = self.value();
        if axis >= x.ndim() {
            return shape_err("sum_axis", format!("axis {axis} out of range for {:?}", x.shape()));
        }
        let (outer, len, inner) = kernels::axis_split(x.shape(), axis);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for a in 0..len {
                let src = &x.data()[(o * len + a) * inner..(o * len + a + 1) * inner];
                for (d, s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let mut shape: Vec<usize> = x.shape().to_vec();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        Ok(self
            .tape
            .push(Op::SumAxis(axis), vec![self.id], Tensor::from_parts(shape, out), false))
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Var<'t>> {
        let len = *self
            .shape()
            .get(axis)
            .ok_or_else(|| Error::Shape {
                op: "mean_axis",
                detail: format!("axis {axis} out of range"),
            })?;
        Ok(self.sum_axis(axis)?.scale(1.0 / len as f64))
    }

    /// 2-D convolution of a `[C_in, H, W]` input with `[C_out, C_in, k, k]`
    /// weights and optional `[C_out]` bias.
    pub fn conv2d(
        &self,
        weight: Var<'t>,
        bias: Option<Var<'t>>,
        stride: usize,
        padding: usize,
    ) -> Result<Var<'t>> {
        const OP: &str = "conv2d";
        self.same_tape(&weight)?;
        let x = self.value();
        let w = weight.value();
        let input = planes_of(OP, x.shape())?;
        let &[co, ci, kh, kw] = w.shape() else {
            return shape_err(OP, format!("weight must be [C_out, C_in, k, k], got {:?}", w.shape()));
        };
        if kh != kw {
            return shape_err(OP, format!("non-square kernel {kh}x{kw}"));
        }
        if ci != input.channels {
            return shape_err(
                OP,
                format!("input has {} channels but weight expects {ci}", input.channels),
            );
        }
        if stride == 0 {
            return param_err(OP, "stride must be >= 1");
        }
        let win = Window::new(kh, stride, padding);
        let (Some(oh), Some(ow)) = (win.output_len(input.height), win.output_len(input.width))
        else {
            return shape_err(
                OP,
                format!(
                    "kernel {kh} with padding {padding} does not fit {}x{}",
                    input.height, input.width
                ),
            );
        };
        let b = match bias {
            Some(b) => {
                self.same_tape(&b)?;
                let bv = b.value();
                if bv.shape() != [co] {
                    return shape_err(OP, format!("bias must be [{co}], got {:?}", bv.shape()));
                }
                Some(bv)
            }
            None => None,
        };
        let out = kernels::conv2d(x.data(), input, w.data(), co, b.as_ref().map(|b| b.data()), win, oh, ow);
        let mut inputs = vec![self.id, weight.id];
        if let Some(b) = bias {
            inputs.push(b.id);
        }
        Ok(self
            .tape
            .push(Op::Conv2d(win), inputs, Tensor::from_parts(vec![co, oh, ow], out), false))
    }

    /// Adjoint of conv2d w.r.t. its input; `self` is the output gradient.
    pub(crate) fn conv_input_grad(&self, weight: Var<'t>, win: Window, input: Planes) -> Var<'t> {
        let g = self.value();
        let w = weight.value();
        let (co, oh, ow) = (g.shape()[0], g.shape()[1], g.shape()[2]);
        let out = kernels::conv2d_input_grad(g.data(), oh, ow, w.data(), co, input, win);
        self.tape.push(
            Op::ConvInputGrad(win, input),
            vec![self.id, weight.id],
            Tensor::from_parts(vec![input.channels, input.height, input.width], out),
            false,
        )
    }

    /// Adjoint of conv2d w.r.t. its weight; `self` is the conv input.
    pub(crate) fn conv_weight_grad(&self, grad_out: Var<'t>, win: Window) -> Var<'t> {
        let x = self.value();
        let g = grad_out.value();
        let input = Planes {
            channels: x.shape()[0],
            height: x.shape()[1],
            width: x.shape()[2],
        };
        let (co, oh, ow) = (g.shape()[0], g.shape()[1], g.shape()[2]);
        let out = kernels::conv2d_weight_grad(x.data(), input, g.data(), co, oh, ow, win);
        let k = win.kernel;
        self.tape.push(
            Op::ConvWeightGrad(win),
            vec![self.id, grad_out.id],
            Tensor::from_parts(vec![co, input.channels, k, k], out),
            false,
        )
    }

    /// Max pooling of `[C, H, W]`; padding behaves as `-inf`.
    pub fn max_pool2d(&self, kernel: usize, stride: usize, padding: usize) -> Result<Var<'t>> {
        const OP: &str = "max_pool2d";
        if kernel == 0 || stride == 0 {
            return param_err(OP, format!("kernel {kernel} and stride {stride} must be >= 1"));
        }
        let x = self.value();
        let input = planes_of(OP, x.shape())?;
        let win = Window::new(kernel, stride, padding);
        let (Some(oh), Some(ow)) = (win.output_len(input.height), win.output_len(input.width))
        else {
            return shape_err(OP, format!("window does not fit {}x{}", input.height, input.width));
        };
        let (vals, argmax) = kernels::max_pool2d(x.data(), input, win, oh, ow);
        Ok(self.tape.push(
            Op::MaxPool(Rc::new(argmax)),
            vec![self.id],
            Tensor::from_parts(vec![input.channels, oh, ow], vals),
            false,
        ))
    }

    /// Affine map over the trailing axis: `x[.., n] -> x W^T + b`, `W: [m, n]`.
    pub fn linear(&self, weight: Var<'t>, bias: Option<Var<'t>>) -> Result<Var<'t>> {
        const OP: &str = "linear";
        self.same_tape(&weight)?;
        let x = self.value();
        let w = weight.value();
        let &[m, n] = w.shape() else {
            return shape_err(OP, format!("weight must be [m, n], got {:?}", w.shape()));
        };
        if x.shape().last() != Some(&n) {
            return shape_err(
                OP,
                format!("trailing dimension of {:?} does not match weight {:?}", x.shape(), w.shape()),
            );
        }
        let rows = x.numel() / n;
        let wt = kernels::transpose(w.data(), m, n);
        let mut out = kernels::matmul(x.data(), &wt, rows, n, m);
        let mut inputs = vec![self.id, weight.id];
        if let Some(b) = bias {
            self.same_tape(&b)?;
            let bv = b.value();
            if bv.shape() != [m] {
                return shape_err(OP, format!("bias must be [{m}], got {:?}", bv.shape()));
            }
            for row in out.chunks_exact_mut(m) {
                for (o, bb) in row.iter_mut().zip(bv.data()) {
                    *o += bb;
                }
            }
            inputs.push(b.id);
        }
        let mut shape = x.shape().to_vec();
        *shape.last_mut().unwrap() = m;
        Ok(self.tape.push(Op::Linear, inputs, Tensor::from_parts(shape, out), false))
    }

    /// `[r, k] @ [k, c]`.
    pub fn matmul(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&other)?;
        let (a, b) = (self.value(), other.value());
        let (&[r, k1], &[k2, c]) = (a.shape(), b.shape()) else {
            return shape_err("matmul", format!("{:?} @ {:?} must both be 2-D", a.shape(), b.shape()));
        };
        if k1 != k2 {
            return shape_err("matmul", format!("{:?} @ {:?}", a.shape(), b.shape()));
        }
        let out = kernels::matmul(a.data(), b.data(), r, k1, c);
        Ok(self.tape.push(
            Op::MatMul,
            vec![self.id, other.id],
            Tensor::from_parts(vec![r, c], out),
            false,
        ))
    }

    pub fn transpose(&self) -> Result<Var<'t>> {
        let a = self.value();
        let &[r, c] = a.shape() else {
            return shape_err("transpose", format!("expected 2-D, got {:?}", a.shape()));
        };
        let out = kernels::transpose(a.data(), r, c);
        Ok(self
            .tape
            .push(Op::Transpose, vec![self.id], Tensor::from_parts(vec![c, r], out), false))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        let out = x.reshape(shape)?;
        Ok(self.tape.push(Op::Reshape, vec![self.id], out, false))
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Result<Var<'t>> {
        let x = self.value();
        if axis >= x.ndim() {
            return shape_err("softmax", format!("axis {axis} out of range for {:?}", x.shape()));
        }
        let (outer, len, inner) = kernels::axis_split(x.shape(), axis);
        let src = x.data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |a: usize| (o * len + a) * inner + i;
                let max = (0..len).map(|a| src[at(a)]).fold(f64::NEG_INFINITY, f64::max);
                let mut denom = 0.0;
                for a in 0..len {
                    let e = (src[at(a)] - max).exp();
                    out[at(a)] = e;
                    denom += e;
                }
                for a in 0..len {
                    out[at(a)] /= denom;
                }
            }
        }
        Ok(self.tape.push(
            Op::Softmax(axis),
            vec![self.id],
            Tensor::from_parts(x.shape().to_vec(), out),
            false,
        ))
    }

    pub fn upsample_nearest2x(&self) -> Result<Var<'t>> {
        let x = self.value();
        let p = planes_of("upsample_nearest2x", x.shape())?;
        let out = kernels::upsample2x(x.data(), p);
        Ok(self.tape.push(
            Op::Upsample2x,
            vec![self.id],
            Tensor::from_parts(vec![p.channels, 2 * p.height, 2 * p.width], out),
            false,
        ))
    }

    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        let x = self.value();
        if axis >= x.ndim() || len == 0 || start + len > x.shape()[axis] {
            return shape_err(
                "slice",
                format!("[{start}, {}) on axis {axis} of {:?}", start + len, x.shape()),
            );
        }
        let (outer, full, inner) = kernels::axis_split(x.shape(), axis);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&x.data()[(o * full + start) * inner..(o * full + start + len) * inner]);
        }
        let mut shape = x.shape().to_vec();
        shape[axis] = len;
        Ok(self.tape.push(
            Op::Slice { axis, start },
            vec![self.id],
            Tensor::from_parts(shape, out),
            false,
        ))
    }

    /// `[d] -> [d, height, width]`, every location holding the input vector.
    pub fn spatial_replicate(&self, height: usize, width: usize) -> Result<Var<'t>> {
        let x = self.value();
        if x.ndim() != 1 || height == 0 || width == 0 {
            return shape_err(
                "spatial_replicate",
                format!("expected [d] and positive extent, got {:?} to {height}x{width}", x.shape()),
            );
        }
        let area = height * width;
        let mut out = Vec::with_capacity(x.numel() * area);
        for &v in x.data() {
            out.extend(std::iter::repeat_n(v, area));
        }
        Ok(self.tape.push(
            Op::Replicate { height, width },
            vec![self.id],
            Tensor::from_parts(vec![x.numel(), height, width], out),
            false,
        ))
    }

    /// `[C, H, W] -> [C]` summing each plane.
    pub fn channel_sum(&self) -> Result<Var<'t>> {
        let x = self.value();
        let p = planes_of("channel_sum", x.shape())?;
        let out = kernels::channel_sum(x.data(), p);
        Ok(self
            .tape
            .push(Op::ChannelSum, vec![self.id], Tensor::from_parts(vec![p.channels], out), false))
    }

    /// `gain[c] * x[c] + shift[c]` for each channel plane.
    pub fn channel_affine(&self, gain: Var<'t>, shift: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&gain)?;
        self.same_tape(&shift)?;
        let x = self.value();
        let p = planes_of("channel_affine", x.shape())?;
        let (g, b) = (gain.value(), shift.value());
        if g.shape() != [p.channels] || b.shape() != [p.channels] {
            return shape_err(
                "channel_affine",
                format!("gain {:?} / shift {:?} for {} channels", g.shape(), b.shape(), p.channels),
            );
        }
        let mut out = x.data().to_vec();
        for (c, plane) in out.chunks_exact_mut(p.area()).enumerate() {
            plane.iter_mut().for_each(|v| *v = g.data()[c] * *v + b.data()[c]);
        }
        Ok(self.tape.push(
            Op::ChannelAffine,
            vec![self.id, gain.id, shift.id],
            Tensor::from_parts(x.shape().to_vec(), out),
            false,
        ))
    }

    /// Per-channel standardization computed separately over the two
    /// regions of a binary spatial partition (`invalid[h*W + w]`). A region
    /// with no cells is skipped; a constant region maps to 0.
    pub fn region_normalize(&self, invalid: &[bool], eps: f64) -> Result<Var<'t>> {
        let x = self.value();
        let p = planes_of("mask_normalize", x.shape())?;
        if invalid.len() != p.area() {
            return shape_err(
                "mask_normalize",
                format!("mask has {} cells, feature plane has {}", invalid.len(), p.area()),
            );
        }
        let mut out = vec![0.0; x.numel()];
        let mut inv_std = vec![0.0; 2 * p.channels];
        for c in 0..p.channels {
            let plane = &x.data()[c * p.area()..(c + 1) * p.area()];
            for region in [false, true] {
                let cells = || plane.iter().zip(invalid).filter(move |(_, &m)| m == region);
                let n = cells().count();
                if n == 0 {
                    continue;
                }
                let first = *cells().next().map(|(v, _)| v).unwrap_or(&0.0);
                let mean = if cells().all(|(v, _)| *v == first) {
                    first
                } else {
                    cells().map(|(v, _)| v).sum::<f64>() / n as f64
                };
                let var = cells().map(|(v, _)| (v - mean).powi(2)).sum::<f64>() / n as f64;
                let inv = 1.0 / (var + eps).sqrt();
                inv_std[2 * c + region as usize] = inv;
                for (i, (&v, &m)) in plane.iter().zip(invalid).enumerate() {
                    if m == region {
                        out[c * p.area() + i] = (v - mean) * inv;
                    }
                }
            }
        }
        Ok(self.tape.push(
            Op::MaskNorm {
                invalid: Rc::new(invalid.to_vec()),
                inv_std: Rc::new(inv_std),
            },
            vec![self.id],
            Tensor::from_parts(x.shape().to_vec(), out),
            false,
        ))
    }

    /// Row lookup into a `[V, d]` table.
    pub fn embedding(&self, indices: &[usize]) -> Result<Var<'t>> {
        let table = self.value();
        let &[vocab, d] = table.shape() else {
            return shape_err("embedding", format!("table must be [V, d], got {:?}", table.shape()));
        };
        if indices.is_empty() {
            return shape_err("embedding", "no indices");
        }
        let mut out = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            if i >= vocab {
                return shape_err("embedding", format!("index {i} outside vocabulary of {vocab}"));
            }
            out.extend_from_slice(&table.data()[i * d..(i + 1) * d]);
        }
        Ok(self.tape.push(
            Op::Embedding(Rc::new(indices.to_vec())),
            vec![self.id],
            Tensor::from_parts(vec![indices.len(), d], out),
            false,
        ))
    }
}

impl Tape {
    /// Joins vars along `axis`; every other dimension must agree.
    pub fn concat<'t>(&'t self, xs: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        const OP: &str = "concat";
        let Some(first) = xs.first() else {
            return shape_err(OP, "nothing to concatenate");
        };
        let values: Vec<Rc<Tensor>> = xs.iter().map(|v| v.value()).collect();
        let base = values[0].shape().to_vec();
        if axis >= base.len() {
            return shape_err(OP, format!("axis {axis} out of range for {base:?}"));
        }
        for (v, var) in values.iter().zip(xs) {
            first.same_tape(var)?;
            let s = v.shape();
            let agree = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !agree {
                return shape_err(OP, format!("{s:?} does not line up with {base:?} on axis {axis}"));
            }
        }
        let (outer, _, inner) = kernels::axis_split(&base, axis);
        let total: usize = values.iter().map(|v| v.shape()[axis]).sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in &values {
                let len = v.shape()[axis];
                out.extend_from_slice(&v.data()[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        Ok(self.push(
            Op::Concat(axis),
            xs.iter().map(|v| v.id).collect(),
            Tensor::from_parts(shape, out),
            false,
        ))
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
