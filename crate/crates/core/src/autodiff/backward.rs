use std::rc::Rc;

use super::kernels::{self, Planes};
use super::{Op, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Gradient flowing into one input when the other operand of a binary op
/// may be a broadcast scalar. `local` maps output index to the partial
/// derivative w.r.t. this input at that position.
fn reduce_if_scalar(input: &Tensor, out_len: usize, g: &[f64], local: impl Fn(usize) -> f64) -> Vec<f64> {
    if input.numel() == 1 && out_len > 1 {
        vec![(0..out_len).map(|i| g[i] * local(i)).sum()]
    } else {
        (0..out_len).map(|i| g[i] * local(i)).collect()
    }
}

fn at(t: &Tensor, i: usize) -> f64 {
    if t.numel() == 1 {
        t.data()[0]
    } else {
        t.data()[i]
    }
}

fn planes(shape: &[usize]) -> Planes {
    Planes {
        channels: shape[0],
        height: shape[1],
        width: shape[2],
    }
}

impl Tape {
    /// Populates gradients of a scalar `loss` on every leaf that requires
    /// them. A second call without [`Tape::reset_grads`] is an error.
    pub fn backward(&self, loss: Var<'_>) -> Result<()> {
        let mut inner = self.inner.borrow_mut();
        if inner.backward_done {
            return Err(Error::Contract(
                "backward already ran on this tape; call reset_grads first".into(),
            ));
        }
        let root = loss.id;
        if inner.nodes[root].value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                inner.nodes[root].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root + 1];
        grads[root] = Some(vec![1.0]);
        let mut leaf_grads: Vec<Option<Rc<Tensor>>> = vec![None; inner.nodes.len()];
        for id in (0..=root).rev() {
            let node = &inner.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else {
                continue;
            };
            if matches!(node.op, Op::Leaf) {
                leaf_grads[id] = Some(Rc::new(Tensor::from_parts(node.value.shape().to_vec(), g)));
                continue;
            }
            let input_grads = numeric_vjp(&inner.nodes, id, &g);
            for (&input, ig) in node.inputs.iter().zip(input_grads) {
                let Some(ig) = ig else { continue };
                if !inner.nodes[input].requires_grad {
                    continue;
                }
                match &mut grads[input] {
                    Some(acc) => acc.iter_mut().zip(&ig).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(ig),
                }
            }
        }
        for (id, node) in inner.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad && leaf_grads[id].is_none() {
                leaf_grads[id] = Some(Rc::new(Tensor::zeros(node.value.shape())));
            }
        }
        inner.grads = leaf_grads;
        inner.backward_done = true;
        Ok(())
    }

    /// Gradients of a scalar `output` with respect to `wrt`, recorded as
    /// new tape nodes so they can be differentiated again.
    ///
    /// Every op on a path from a `wrt` var to `output` must belong to the
    /// double-backward subset; otherwise the op is named in the error.
    pub fn grad_of_grad<'t>(&'t self, output: Var<'t>, wrt: &[Var<'t>]) -> Result<Vec<Var<'t>>> {
        let root = output.id;
        let (depends, out_numel) = {
            let inner = self.inner.borrow();
            let mut depends = vec![false; root + 1];
            for w in wrt {
                if w.id <= root {
                    depends[w.id] = true;
                }
            }
            for id in 0..=root {
                if !depends[id] {
                    depends[id] = inner.nodes[id].inputs.iter().any(|&i| depends[i]);
                }
            }
            (depends, inner.nodes[root].value.numel())
        };
        if out_numel != 1 {
            return Err(Error::Contract(format!(
                "grad_of_grad needs a scalar output, got {} elements",
                out_numel
            )));
        }
        let mut grads: Vec<Option<Var<'t>>> = vec![None; root + 1];
        grads[root] = Some(self.constant(Tensor::ones(&output.shape())));
        for id in (0..=root).rev() {
            if !depends[id] {
                continue;
            }
            let Some(g) = grads[id] else { continue };
            let (op, inputs) = {
                let inner = self.inner.borrow();
                (inner.nodes[id].op.clone(), inner.nodes[id].inputs.clone())
            };
            if matches!(op, Op::Leaf) {
                continue;
            }
            let wanted: Vec<bool> = inputs.iter().map(|&i| depends[i]).collect();
            let input_grads = self.graph_vjp(&op, &inputs, id, g, &wanted)?;
            for ((&input, ig), want) in inputs.iter().zip(input_grads).zip(wanted) {
                let Some(ig) = ig else { continue };
                if !want {
                    continue;
                }
                grads[input] = Some(match grads[input] {
                    Some(acc) => acc.add(ig)?,
                    None => ig,
                });
            }
        }
        Ok(wrt
            .iter()
            .map(|w| match grads.get(w.id).copied().flatten() {
                Some(g) => g,
                None => self.constant(Tensor::zeros(&w.shape())),
            })
            .collect())
    }

    fn graph_vjp<'t>(
        &'t self,
        op: &Op,
        inputs: &[usize],
        out_id: usize,
        g: Var<'t>,
        wanted: &[bool],
    ) -> Result<Vec<Option<Var<'t>>>> {
        let input = |k: usize| self.var(inputs[k]);
        let scalar_reduce = |k: usize, v: Var<'t>| -> Result<Var<'t>> {
            if input(k).numel() == 1 && v.numel() > 1 {
                v.sum().reshape(&input(k).shape())
            } else {
                Ok(v)
            }
        };
        let mut out: Vec<Option<Var<'t>>> = vec![None; inputs.len()];
        match op {
            Op::Add | Op::Sub => {
                if wanted[0] {
                    out[0] = Some(scalar_reduce(0, g)?);
                }
                if wanted[1] {
                    let gb = if matches!(op, Op::Sub) { g.neg() } else { g };
                    out[1] = Some(scalar_reduce(1, gb)?);
                }
            }
            Op::Mul => {
                if wanted[0] {
                    out[0] = Some(scalar_reduce(0, g.mul(input(1))?)?);
                }
                if wanted[1] {
                    out[1] = Some(scalar_reduce(1, g.mul(input(0))?)?);
                }
            }
            Op::Scale(c) => out[0] = Some(g.scale(*c)),
            Op::AddScalar => out[0] = Some(g),
            Op::LeakyRelu(slope) => {
                let slopes = input(0).value().map(|x| if x > 0.0 { 1.0 } else { *slope });
                out[0] = Some(g.mul(self.constant(slopes))?);
            }
            Op::Pow(p) => {
                let local = if *p == 1.0 {
                    None
                } else {
                    Some(input(0).powf(p - 1.0).scale(*p))
                };
                out[0] = Some(match local {
                    Some(l) => g.mul(l)?,
                    None => g,
                });
            }
            Op::Sqrt => out[0] = Some(g.mul(self.var(out_id).half_recip())?),
            Op::Sum => {
                let ones = self.constant(Tensor::ones(&input(0).shape()));
                out[0] = Some(ones.mul(g)?);
            }
            Op::Conv2d(win) => {
                let x = input(0);
                let w = input(1);
                if wanted[0] {
                    out[0] = Some(g.conv_input_grad(w, *win, planes(&x.shape())));
                }
                if wanted[1] {
                    out[1] = Some(x.conv_weight_grad(g, *win));
                }
                if inputs.len() == 3 && wanted[2] {
                    out[2] = Some(g.channel_sum()?);
                }
            }
            Op::ConvInputGrad(win, _) => {
                // self = conv_input_grad(go, w); g has the conv input's shape
                let go = input(0);
                let w = input(1);
                if wanted[0] {
                    out[0] = Some(g.conv2d(w, None, win.stride, win.padding)?);
                }
                if wanted[1] {
                    out[1] = Some(g.conv_weight_grad(go, *win));
                }
            }
            Op::ConvWeightGrad(win) => {
                // self = conv_weight_grad(x, go); g has the weight's shape
                let x = input(0);
                let go = input(1);
                if wanted[0] {
                    out[0] = Some(go.conv_input_grad(g, *win, planes(&x.shape())));
                }
                if wanted[1] {
                    out[1] = Some(x.conv2d(g, None, win.stride, win.padding)?);
                }
            }
            Op::Linear => {
                let x = input(0);
                let w = input(1);
                let xs = x.shape();
                let wshape = w.shape();
                let (m, n) = (wshape[0], wshape[1]);
                let rows = x.numel() / n;
                let g2 = g.reshape(&[rows, m])?;
                if wanted[0] {
                    out[0] = Some(g2.matmul(w)?.reshape(&xs)?);
                }
                if wanted[1] {
                    out[1] = Some(g2.transpose()?.matmul(x.reshape(&[rows, n])?)?);
                }
                if inputs.len() == 3 && wanted[2] {
                    let ones = self.constant(Tensor::ones(&[1, rows]));
                    out[2] = Some(ones.matmul(g2)?.reshape(&[m])?);
                }
            }
            Op::MatMul => {
                if wanted[0] {
                    out[0] = Some(g.matmul(input(1).transpose()?)?);
                }
                if wanted[1] {
                    out[1] = Some(input(0).transpose()?.matmul(g)?);
                }
            }
            Op::Transpose => out[0] = Some(g.transpose()?),
            Op::Reshape => out[0] = Some(g.reshape(&input(0).shape())?),
            Op::Concat(axis) => {
                let mut start = 0;
                for k in 0..inputs.len() {
                    let len = input(k).shape()[*axis];
                    if wanted[k] {
                        out[k] = Some(g.slice(*axis, start, len)?);
                    }
                    start += len;
                }
            }
            Op::Slice { axis, start } => {
                let full = input(0).shape();
                let len = g.shape()[*axis];
                let mut pieces = Vec::with_capacity(3);
                let pad = |extent: usize| {
                    let mut s = full.clone();
                    s[*axis] = extent;
                    self.constant(Tensor::zeros(&s))
                };
                if *start > 0 {
                    pieces.push(pad(*start));
                }
                pieces.push(g);
                let after = full[*axis] - start - len;
                if after > 0 {
                    pieces.push(pad(after));
                }
                out[0] = Some(self.concat(&pieces, *axis)?);
            }
            Op::Replicate { .. } => out[0] = Some(g.channel_sum()?),
            Op::ChannelSum => {
                let s = input(0).shape();
                out[0] = Some(g.spatial_replicate(s[1], s[2])?);
            }
            other => return Err(Error::UnsupportedDoubleBackward(other.name())),
        }
        Ok(out)
    }
}

/// Plain vector-Jacobian product of node `id` for upstream gradient `g`.
/// Returns one entry per input; `None` where no gradient is produced.
fn numeric_vjp(nodes: &[super::Node], id: usize, g: &[f64]) -> Vec<Option<Vec<f64>>> {
    let node = &nodes[id];
    let val = |k: usize| -> &Tensor { &nodes[node.inputs[k]].value };
    let needs = |k: usize| nodes[node.inputs[k]].requires_grad;
    let y = &node.value;
    let n = y.numel();
    let elementwise = |f: &dyn Fn(usize) -> f64| -> Vec<Option<Vec<f64>>> {
        vec![Some((0..n).map(|i| g[i] * f(i)).collect())]
    };
    match &node.op {
        Op::Leaf => Vec::new(),
        Op::Add => vec![
            Some(reduce_if_scalar(val(0), n, g, |_| 1.0)),
            Some(reduce_if_scalar(val(1), n, g, |_| 1.0)),
        ],
        Op::Sub => vec![
            Some(reduce_if_scalar(val(0), n, g, |_| 1.0)),
            Some(reduce_if_scalar(val(1), n, g, |_| -1.0)),
        ],
        Op::Mul => {
            let (a, b) = (val(0), val(1));
            vec![
                needs(0).then(|| reduce_if_scalar(a, n, g, |i| at(b, i))),
                needs(1).then(|| reduce_if_scalar(b, n, g, |i| at(a, i))),
            ]
        }
        Op::Scale(c) => elementwise(&|_| *c),
        Op::AddScalar => elementwise(&|_| 1.0),
        Op::Relu => {
            let x = val(0).data();
            elementwise(&|i| if x[i] > 0.0 { 1.0 } else { 0.0 })
        }
        Op::LeakyRelu(slope) => {
            let x = val(0).data();
            elementwise(&|i| if x[i] > 0.0 { 1.0 } else { *slope })
        }
        Op::Tanh => {
            let yd = y.data();
            elementwise(&|i| 1.0 - yd[i] * yd[i])
        }
        Op::Sigmoid => {
            let yd = y.data();
            elementwise(&|i| yd[i] * (1.0 - yd[i]))
        }
        Op::Abs => {
            let x = val(0).data();
            elementwise(&|i| {
                if x[i] > 0.0 {
                    1.0
                } else if x[i] < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            })
        }
        Op::Pow(p) => {
            let x = val(0).data();
            elementwise(&|i| if *p == 0.0 { 0.0 } else { p * x[i].powf(p - 1.0) })
        }
        Op::Sqrt => {
            let yd = y.data();
            elementwise(&|i| if yd[i] > 0.0 { 0.5 / yd[i] } else { 0.0 })
        }
        Op::HalfRecip => {
            let x = val(0).data();
            elementwise(&|i| if x[i] > 0.0 { -0.5 / (x[i] * x[i]) } else { 0.0 })
        }
        Op::Exp => {
            let yd = y.data();
            elementwise(&|i| yd[i])
        }
        Op::Sum => vec![Some(vec![g[0]; val(0).numel()])],
        Op::SumAxis(axis) => {
            let x = val(0);
            let (outer, len, inner) = kernels::axis_split(x.shape(), *axis);
            let mut gx = vec![0.0; x.numel()];
            for o in 0..outer {
                for a in 0..len {
                    gx[(o * len + a) * inner..(o * len + a + 1) * inner]
                        .copy_from_slice(&g[o * inner..(o + 1) * inner]);
                }
            }
            vec![Some(gx)]
        }
        Op::Conv2d(win) => {
            let x = val(0);
            let w = val(1);
            let input = planes(x.shape());
            let (co, oh, ow) = (y.shape()[0], y.shape()[1], y.shape()[2]);
            let mut out = vec![
                needs(0).then(|| kernels::conv2d_input_grad(g, oh, ow, w.data(), co, input, *win)),
                needs(1).then(|| kernels::conv2d_weight_grad(x.data(), input, g, co, oh, ow, *win)),
            ];
            if node.inputs.len() == 3 {
                out.push(needs(2).then(|| {
                    kernels::channel_sum(
                        g,
                        Planes {
                            channels: co,
                            height: oh,
                            width: ow,
                        },
                    )
                }));
            }
            out
        }
        Op::ConvInputGrad(win, input) => {
            let go = val(0);
            let w = val(1);
            let (co, oh, ow) = (go.shape()[0], go.shape()[1], go.shape()[2]);
            vec![
                needs(0).then(|| {
                    kernels::conv2d(g, *input, w.data(), co, None, *win, oh, ow)
                }),
                needs(1).then(|| kernels::conv2d_weight_grad(g, *input, go.data(), co, oh, ow, *win)),
            ]
        }
        Op::ConvWeightGrad(win) => {
            let x = val(0);
            let go = val(1);
            let input = planes(x.shape());
            let (co, oh, ow) = (go.shape()[0], go.shape()[1], go.shape()[2]);
            vec![
                needs(0).then(|| kernels::conv2d_input_grad(go.data(), oh, ow, g, co, input, *win)),
                needs(1).then(|| kernels::conv2d(x.data(), input, g, co, None, *win, oh, ow)),
            ]
        }
        Op::MaxPool(argmax) => {
            let mut gx = vec![0.0; val(0).numel()];
            for (o, &src) in argmax.iter().enumerate() {
                if src != usize::MAX {
                    gx[src] += g[o];
                }
            }
            vec![Some(gx)]
        }
        Op::Linear => {
            let x = val(0);
            let w = val(1);
            let (m, nn) = (w.shape()[0], w.shape()[1]);
            let rows = x.numel() / nn;
            let mut out = vec![
                needs(0).then(|| kernels::matmul(g, w.data(), rows, m, nn)),
                needs(1).then(|| {
                    let gt = kernels::transpose(g, rows, m);
                    kernels::matmul(&gt, x.data(), m, rows, nn)
                }),
            ];
            if node.inputs.len() == 3 {
                out.push(needs(2).then(|| {
                    let mut gb = vec![0.0; m];
                    for row in g.chunks_exact(m) {
                        gb.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                    }
                    gb
                }));
            }
            out
        }
        Op::MatMul => {
            let (a, b) = (val(0), val(1));
            let (r, k, c) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            vec![
                needs(0).then(|| kernels::matmul(g, &kernels::transpose(b.data(), k, c), r, c, k)),
                needs(1).then(|| kernels::matmul(&kernels::transpose(a.data(), r, k), g, k, r, c)),
            ]
        }
        Op::Transpose => {
            let (r, c) = (val(0).shape()[0], val(0).shape()[1]);
            vec![Some(kernels::transpose(g, c, r))]
        }
        Op::Reshape => vec![Some(g.to_vec())],
        Op::Softmax(axis) => {
            let (outer, len, inner) = kernels::axis_split(y.shape(), *axis);
            let yd = y.data();
            let mut gx = vec![0.0; n];
            for o in 0..outer {
                for i in 0..inner {
                    let idx = |a: usize| (o * len + a) * inner + i;
                    let dot: f64 = (0..len).map(|a| g[idx(a)] * yd[idx(a)]).sum();
                    for a in 0..len {
                        gx[idx(a)] = yd[idx(a)] * (g[idx(a)] - dot);
                    }
                }
            }
            vec![Some(gx)]
        }
        Op::Upsample2x => vec![Some(kernels::upsample2x_grad(g, planes(val(0).shape())))],
        Op::Concat(axis) => {
            let (outer, total, inner) = kernels::axis_split(y.shape(), *axis);
            let mut start = 0;
            let mut out = Vec::with_capacity(node.inputs.len());
            for k in 0..node.inputs.len() {
                let len = val(k).shape()[*axis];
                let mut gk = Vec::with_capacity(outer * len * inner);
                for o in 0..outer {
                    gk.extend_from_slice(&g[(o * total + start) * inner..(o * total + start + len) * inner]);
                }
                start += len;
                out.push(Some(gk));
            }
            out
        }
        Op::Slice { axis, start } => {
            let x = val(0);
            let (outer, full, inner) = kernels::axis_split(x.shape(), *axis);
            let len = y.shape()[*axis];
            let mut gx = vec![0.0; x.numel()];
            for o in 0..outer {
                gx[(o * full + start) * inner..(o * full + start + len) * inner]
                    .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Some(gx)]
        }
        Op::Replicate { height, width } => {
            let area = height * width;
            vec![Some(g.chunks_exact(area).map(|c| c.iter().sum()).collect())]
        }
        Op::ChannelSum => {
            let area = val(0).numel() / g.len();
            vec![Some(g.iter().flat_map(|&v| std::iter::repeat_n(v, area)).collect())]
        }
        Op::ChannelAffine => {
            let x = val(0);
            let gain = val(1);
            let area = x.numel() / gain.numel();
            let mut gx = vec![0.0; x.numel()];
            let mut gg = vec![0.0; gain.numel()];
            let mut gs = vec![0.0; gain.numel()];
            for c in 0..gain.numel() {
                for i in c * area..(c + 1) * area {
                    gx[i] = gain.data()[c] * g[i];
                    gg[c] += g[i] * x.data()[i];
                    gs[c] += g[i];
                }
            }
            vec![needs(0).then_some(gx), needs(1).then_some(gg), needs(2).then_some(gs)]
        }
        Op::MaskNorm { invalid, inv_std } => {
            let area = invalid.len();
            let channels = n / area;
            let yd = y.data();
            let mut gx = vec![0.0; n];
            for c in 0..channels {
                for region in [false, true] {
                    let idx: Vec<usize> = (0..area).filter(|&i| invalid[i] == region).map(|i| c * area + i).collect();
                    if idx.is_empty() {
                        continue;
                    }
                    let cnt = idx.len() as f64;
                    let mean_g = idx.iter().map(|&i| g[i]).sum::<f64>() / cnt;
                    let mean_gy = idx.iter().map(|&i| g[i] * yd[i]).sum::<f64>() / cnt;
                    let inv = inv_std[2 * c + region as usize];
                    for &i in &idx {
                        gx[i] = inv * (g[i] - mean_g - yd[i] * mean_gy);
                    }
                }
            }
            vec![Some(gx)]
        }
        Op::Embedding(indices) => {
            let table = val(0);
            let d = table.shape()[1];
            let mut gt = vec![0.0; table.numel()];
            for (row, &i) in indices.iter().enumerate() {
                gt[i * d..(i + 1) * d]
                    .iter_mut()
                    .zip(&g[row * d..(row + 1) * d])
                    .for_each(|(a, b)| *a += b);
            }
            vec![Some(gt)]
        }
    }
}
