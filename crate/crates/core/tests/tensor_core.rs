use daft_core::gradcheck::suites::{randn, run_target, scalar_fn, tensor_targets};
use daft_core::gradcheck::{check, FdConfig};
use daft_core::{Error, Tape, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = (x - y).abs();
            if d == 0.0 {
                0.0
            } else {
                d / x.abs().max(y.abs())
            }
        })
        .fold(0.0, f64::max)
}

// ---- convolution -------------------------------------------------------

struct ConvOracle {
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
}

impl ConvOracle {
    fn out_dims(&self) -> (usize, usize) {
        (
            (self.h + 2 * self.pad - self.k) / self.stride + 1,
            (self.w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }

    /// Visits every (output, input, weight) index triple that contributes.
    fn each(&self, mut f: impl FnMut(usize, usize, usize)) {
        let (oh, ow) = self.out_dims();
        for co in 0..self.cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    for ci in 0..self.cin {
                        for ky in 0..self.k {
                            for kx in 0..self.k {
                                let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                                let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                                if iy < 0 || ix < 0 || iy >= self.h as isize || ix >= self.w as isize {
                                    continue;
                                }
                                let o = (co * oh + oy) * ow + ox;
                                let i = (ci * self.h + iy as usize) * self.w + ix as usize;
                                let wi = ((co * self.cin + ci) * self.k + ky) * self.k + kx;
                                f(o, i, wi);
                            }
                        }
                    }
                }
            }
        }
    }
}

#[test]
fn conv_one_by_one_is_scalar_multiply() {
    let tape = Tape::new();
    let x = tape.constant(t(&[1, 1, 1], &[1.0]));
    let w = tape.constant(t(&[1, 1, 1, 1], &[2.0]));
    let b = tape.constant(t(&[1], &[0.0]));
    let y = x.conv2d(w, Some(b), 1, 0).unwrap();
    assert_eq!(y.shape(), vec![1, 1, 1]);
    assert_eq!(y.value().data(), &[2.0]);
}

#[test]
fn conv_all_ones_window_sum() {
    let tape = Tape::new();
    let x = tape.constant(Tensor::ones(&[1, 4, 4]));
    let w = tape.constant(Tensor::ones(&[1, 1, 2, 2]));
    let b = tape.constant(Tensor::zeros(&[1]));
    let y = x.conv2d(w, Some(b), 2, 0).unwrap();
    assert_eq!(y.shape(), vec![1, 2, 2]);
    assert_eq!(y.value().data(), &[4.0; 4]);
}

fn conv_matches_oracle(o: ConvOracle, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = randn(&mut rng, &[o.cin, o.h, o.w], 1.0);
    let w = randn(&mut rng, &[o.cout, o.cin, o.k, o.k], 1.0);
    let b = randn(&mut rng, &[o.cout], 1.0);
    let (oh, ow) = o.out_dims();
    let g = randn(&mut rng, &[o.cout, oh, ow], 1.0);

    let tape = Tape::new();
    let xv = tape.param(x.clone());
    let wv = tape.param(w.clone());
    let bv = tape.param(b.clone());
    let y = xv.conv2d(wv, Some(bv), o.stride, o.pad).unwrap();
    let loss = y.mul(tape.constant(g.clone())).unwrap().sum();
    tape.backward(loss).unwrap();

    let mut out = vec![0.0; o.cout * oh * ow];
    for (i, v) in out.iter_mut().enumerate() {
        *v = b.data()[i / (oh * ow)];
    }
    let mut gx = vec![0.0; x.numel()];
    let mut gw = vec![0.0; w.numel()];
    o.each(|oi, ii, wi| {
        out[oi] += x.data()[ii] * w.data()[wi];
        gx[ii] += g.data()[oi] * w.data()[wi];
        gw[wi] += g.data()[oi] * x.data()[ii];
    });
    let mut gb = vec![0.0; o.cout];
    for (i, gv) in g.data().iter().enumerate() {
        gb[i / (oh * ow)] += gv;
    }

    assert_eq!(y.shape(), vec![o.cout, oh, ow]);
    assert!(rel_err(y.value().data(), &out) < 1e-10);
    assert!(rel_err(tape.grad(xv).unwrap().data(), &gx) < 1e-10);
    assert!(rel_err(tape.grad(wv).unwrap().data(), &gw) < 1e-10);
    assert!(rel_err(tape.grad(bv).unwrap().data(), &gb) < 1e-10);
}

#[test]
fn conv_matches_direct_loop_oracle() {
    for seed in 0..10 {
        conv_matches_oracle(
            ConvOracle { cin: 2, h: 5, w: 5, cout: 3, k: 3, stride: 1, pad: 1 },
            seed,
        );
    }
    conv_matches_oracle(ConvOracle { cin: 3, h: 8, w: 6, cout: 2, k: 4, stride: 2, pad: 1 }, 99);
    conv_matches_oracle(ConvOracle { cin: 1, h: 7, w: 7, cout: 2, k: 3, stride: 3, pad: 0 }, 7);
}

#[test]
fn conv_rejects_channel_mismatch() {
    let tape = Tape::new();
    let x = tape.constant(Tensor::ones(&[2, 4, 4]));
    let w = tape.constant(Tensor::ones(&[1, 3, 3, 3]));
    let err = x.conv2d(w, None, 1, 1).unwrap_err();
    assert!(matches!(err, Error::Shape { .. }), "{err}");
}

#[test]
fn conv_rejects_window_larger_than_padded_input() {
    let tape = Tape::new();
    let x = tape.constant(Tensor::ones(&[1, 2, 2]));
    let w = tape.constant(Tensor::ones(&[1, 1, 5, 5]));
    assert!(x.conv2d(w, None, 1, 1).is_err());
    assert!(x.conv2d(w, None, 0, 2).is_err());
}

// ---- max pool ----------------------------------------------------------

#[test]
fn max_pool_single_window() {
    let tape = Tape::new();
    let x = tape.constant(t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let y = x.max_pool2d(2, 2, 0).unwrap();
    assert_eq!(y.value().data(), &[4.0]);
}

#[test]
fn max_pool_ties_route_to_first_element() {
    let tape = Tape::new();
    let x = tape.param(Tensor::full(&[1, 4, 4], 0.5));
    let y = x.max_pool2d(2, 2, 0).unwrap();
    assert_eq!(y.value().data(), &[0.5; 4]);
    tape.backward(y.sum()).unwrap();
    let g = tape.grad(x).unwrap();
    let mut expect = [0.0; 16];
    for idx in [0, 2, 8, 10] {
        expect[idx] = 1.0;
    }
    assert_eq!(g.data(), &expect[..]);
}

#[test]
fn max_pool_rejects_zero_kernel_or_stride() {
    let tape = Tape::new();
    let x = tape.constant(Tensor::ones(&[1, 4, 4]));
    assert!(matches!(x.max_pool2d(0, 1, 0), Err(Error::Param { .. })));
    assert!(matches!(x.max_pool2d(2, 0, 0), Err(Error::Param { .. })));
}

#[test]
fn max_pool_matches_sliding_window_oracle() {
    let (h, w, k, s, p) = (6usize, 6usize, 3usize, 2usize, 1usize);
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = randn(&mut rng, &[2, h, w], 1.0);
        let oh = (h + 2 * p - k) / s + 1;
        let g = randn(&mut rng, &[2, oh, oh], 1.0);
        let tape = Tape::new();
        let xv = tape.param(x.clone());
        let y = xv.max_pool2d(k, s, p).unwrap();
        tape.backward(y.mul(tape.constant(g.clone())).unwrap().sum()).unwrap();

        let mut out = Vec::new();
        let mut gx = vec![0.0; x.numel()];
        for c in 0..2 {
            for oy in 0..oh {
                for ox in 0..oh {
                    let mut best = f64::NEG_INFINITY;
                    let mut arg = None;
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (oy * s + ky) as isize - p as isize;
                            let ix = (ox * s + kx) as isize - p as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            let i = (c * h + iy as usize) * w + ix as usize;
                            if x.data()[i] > best {
                                best = x.data()[i];
                                arg = Some(i);
                            }
                        }
                    }
                    out.push(best);
                    gx[arg.unwrap()] += g.data()[(c * oh + oy) * oh + ox];
                }
            }
        }
        assert_eq!(y.value().data(), &out[..]);
        assert_eq!(tape.grad(xv).unwrap().data(), &gx[..]);
    }
}

// ---- linear / matmul ---------------------------------------------------

#[test]
fn linear_identity_and_bias_only() {
    let tape = Tape::new();
    let x = tape.constant(t(&[2, 3], &[1.0, -2.0, 3.0, 0.5, 0.0, -1.0]));
    let eye = tape.constant(Tensor::from_fn(&[3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 }));
    let zero_b = tape.constant(Tensor::zeros(&[3]));
    let y = x.linear(eye, Some(zero_b)).unwrap();
    assert_eq!(y.value().data(), x.value().data());

    let zw = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(t(&[2], &[7.0, -1.5]));
    let y = x.linear(zw, Some(b)).unwrap();
    assert_eq!(y.value().data(), &[7.0, -1.5, 7.0, -1.5]);
}

#[test]
fn linear_rejects_trailing_mismatch() {
    let tape = Tape::new();
    let x = tape.constant(Tensor::ones(&[2, 3]));
    let w = tape.constant(Tensor::ones(&[5, 4]));
    assert!(matches!(x.linear(w, None), Err(Error::Shape { .. })));
}

#[test]
fn linear_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = randn(&mut rng, &[3, 4], 1.0);
    let w = randn(&mut rng, &[5, 4], 1.0);
    let b = randn(&mut rng, &[5], 1.0);
    let tape = Tape::new();
    let y = tape
        .constant(x.clone())
        .linear(tape.constant(w.clone()), Some(tape.constant(b.clone())))
        .unwrap();
    let mut out = vec![0.0; 15];
    for i in 0..3 {
        for j in 0..5 {
            let mut acc = b.data()[j];
            for k in 0..4 {
                acc += x.data()[i * 4 + k] * w.data()[j * 4 + k];
            }
            out[i * 5 + j] = acc;
        }
    }
    assert_eq!(y.shape(), vec![3, 5]);
    assert!(rel_err(y.value().data(), &out) < 1e-12);

    let a = randn(&mut rng, &[3, 4], 1.0);
    let c = randn(&mut rng, &[4, 2], 1.0);
    let m = tape.constant(a.clone()).matmul(tape.constant(c.clone())).unwrap();
    let mut out = vec![0.0; 6];
    for i in 0..3 {
        for j in 0..2 {
            for k in 0..4 {
                out[i * 2 + j] += a.data()[i * 4 + k] * c.data()[k * 2 + j];
            }
        }
    }
    assert!(rel_err(m.value().data(), &out) < 1e-12);
}

// ---- softmax -----------------------------------------------------------

#[test]
fn softmax_closed_forms() {
    let tape = Tape::new();
    let y = tape.constant(Tensor::full(&[4], 2.5)).softmax(0).unwrap();
    assert_eq!(y.value().data(), &[0.25; 4]);
    let y = tape.constant(t(&[2], &[0.0, 3f64.ln()])).softmax(0).unwrap();
    assert!(rel_err(y.value().data(), &[0.25, 0.75]) < 1e-15);
}

#[test]
fn softmax_rejects_bad_axis() {
    let tape = Tape::new();
    assert!(tape.constant(Tensor::ones(&[2, 3])).softmax(2).is_err());
}

/// Neumaier-compensated sum.
fn compensated_sum(xs: impl Iterator<Item = f64>) -> f64 {
    let (mut s, mut c) = (0.0f64, 0.0f64);
    for x in xs {
        let t = s + x;
        c += if s.abs() >= x.abs() { (s - t) + x } else { (x - t) + s };
        s = t;
    }
    s + c
}

#[test]
fn softmax_matches_compensated_oracle() {
    for seed in 0..30 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = randn(&mut rng, &[17], 4.0);
        let tape = Tape::new();
        let y = tape.constant(x.clone()).softmax(0).unwrap();
        // p_i = 1 / sum_j exp(x_j - x_i): avoids the shared-max path.
        let oracle: Vec<f64> = x
            .data()
            .iter()
            .map(|xi| 1.0 / compensated_sum(x.data().iter().map(|xj| (xj - xi).exp())))
            .collect();
        assert!(rel_err(y.value().data(), &oracle) < 1e-13);
    }
}

proptest! {
    #[test]
    fn softmax_sums_to_one(vals in prop::collection::vec(-1e3f64..1e3, 1..40)) {
        let tape = Tape::new();
        let n = vals.len();
        let y = tape.constant(Tensor::new(vec![n], vals).unwrap()).softmax(0).unwrap();
        let v = y.value();
        prop_assert!(v.data().iter().all(|p| *p >= 0.0));
        prop_assert!((v.data().iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn softmax_rows_sum_to_one(vals in prop::collection::vec(-1e3f64..1e3, 12)) {
        let tape = Tape::new();
        let y = tape.constant(Tensor::new(vec![3, 4], vals).unwrap()).softmax(1).unwrap();
        for row in y.value().data().chunks(4) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn concat_split_round_trip(
        a in prop::collection::vec(-1e6f64..1e6, 6),
        b in prop::collection::vec(-1e6f64..1e6, 9),
        axis in 0usize..2,
    ) {
        let tape = Tape::new();
        let (sa, sb) = if axis == 0 { ([2, 3], [3, 3]) } else { ([3, 2], [3, 3]) };
        let av = tape.constant(Tensor::new(sa.to_vec(), a).unwrap());
        let bv = tape.constant(Tensor::new(sb.to_vec(), b).unwrap());
        let c = tape.concat(&[av, bv], axis).unwrap();
        let la = sa[axis];
        let back_a = c.slice(axis, 0, la).unwrap();
        let back_b = c.slice(axis, la, sb[axis]).unwrap();
        prop_assert_eq!(back_a.value().data().to_vec(), av.value().data().to_vec());
        prop_assert_eq!(back_b.value().data().to_vec(), bv.value().data().to_vec());
        let again = tape.concat(&[back_a, back_b], axis).unwrap();
        prop_assert_eq!(again.value().data().to_vec(), c.value().data().to_vec());
    }
}

// ---- elementwise -------------------------------------------------------

#[test]
fn elementwise_closed_forms() {
    let tape = Tape::new();
    let y = tape.constant(t(&[2], &[-2.0, 3.0])).relu();
    assert_eq!(y.value().data(), &[0.0, 3.0]);
    let n = tape.constant(t(&[2], &[3.0, 4.0])).square_norm();
    assert_eq!(n.item(), 25.0);
    let l = tape.constant(t(&[2], &[-1.0, 2.0])).leaky_relu(0.2);
    assert_eq!(l.value().data(), &[-0.2, 2.0]);

    let x = tape.param(t(&[1], &[1.5]));
    tape.backward(x.powf(6.0)).unwrap();
    assert!((tape.grad(x).unwrap().item() - 45.5625).abs() < 1e-12);
}

#[test]
fn elementwise_scalar_broadcast_and_mismatch() {
    let tape = Tape::new();
    let x = tape.constant(t(&[3], &[1.0, 2.0, 3.0]));
    let s = tape.constant(Tensor::scalar(2.0));
    assert_eq!(x.mul(s).unwrap().value().data(), &[2.0, 4.0, 6.0]);
    assert_eq!(s.sub(x).unwrap().value().data(), &[1.0, 0.0, -1.0]);
    let y = tape.constant(Tensor::ones(&[2]));
    assert!(matches!(x.add(y), Err(Error::Shape { .. })));
}

#[test]
fn reductions() {
    let tape = Tape::new();
    let x = tape.constant(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
    assert_eq!(x.sum().item(), 21.0);
    assert_eq!(x.mean().item(), 3.5);
    assert_eq!(x.sum_axis(0).unwrap().value().data(), &[5.0, 7.0, 9.0]);
    assert_eq!(x.sum_axis(1).unwrap().value().data(), &[6.0, 15.0]);
    assert_eq!(x.mean_axis(1).unwrap().value().data(), &[2.0, 5.0]);
}

// ---- upsample ----------------------------------------------------------

#[test]
fn upsample_blocks() {
    let tape = Tape::new();
    let y = tape.constant(t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0])).upsample_nearest2x().unwrap();
    assert_eq!(y.shape(), vec![1, 4, 4]);
    assert_eq!(
        y.value().data(),
        &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0, 3.0, 3.0, 4.0, 4.0]
    );
    let c = tape.constant(Tensor::full(&[2, 3, 3], 0.7)).upsample_nearest2x().unwrap();
    assert!(c.value().data().iter().all(|v| *v == 0.7));
}

#[test]
fn upsample_matches_index_map_and_block_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = randn(&mut rng, &[1, 3, 3], 1.0);
    let g = randn(&mut rng, &[1, 6, 6], 1.0);
    let tape = Tape::new();
    let xv = tape.param(x.clone());
    let y = xv.upsample_nearest2x().unwrap();
    tape.backward(y.mul(tape.constant(g.clone())).unwrap().sum()).unwrap();
    for oy in 0..6 {
        for ox in 0..6 {
            assert_eq!(y.value().data()[oy * 6 + ox], x.data()[(oy / 2) * 3 + ox / 2]);
        }
    }
    let gx = tape.grad(xv).unwrap();
    for iy in 0..3 {
        for ix in 0..3 {
            let mut s = 0.0;
            for dy in 0..2 {
                for dx in 0..2 {
                    s += g.data()[(2 * iy + dy) * 6 + 2 * ix + dx];
                }
            }
            assert!((gx.data()[iy * 3 + ix] - s).abs() < 1e-14);
        }
    }
}

// ---- concat ------------------------------------------------------------

#[test]
fn concat_examples() {
    let tape = Tape::new();
    let a = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    assert_eq!(tape.concat(&[a], 0).unwrap().value().data(), a.value().data());
    let one = tape.constant(t(&[1], &[1.0]));
    let two = tape.constant(t(&[1], &[2.0]));
    assert_eq!(tape.concat(&[one, two], 0).unwrap().value().data(), &[1.0, 2.0]);
    let bad = tape.constant(Tensor::ones(&[3, 3]));
    assert!(matches!(tape.concat(&[a, bad], 0), Err(Error::Shape { .. })));
}

#[test]
fn concat_gradient_splits_back() {
    let tape = Tape::new();
    let a = tape.param(Tensor::ones(&[1, 2]));
    let b = tape.param(Tensor::ones(&[1, 3]));
    let c = tape.concat(&[a, b], 1).unwrap();
    let w = tape.constant(t(&[1, 5], &[1.0, 2.0, 3.0, 4.0, 5.0]));
    tape.backward(c.mul(w).unwrap().sum()).unwrap();
    assert_eq!(tape.grad(a).unwrap().data(), &[1.0, 2.0]);
    assert_eq!(tape.grad(b).unwrap().data(), &[3.0, 4.0, 5.0]);
}

// ---- backward ----------------------------------------------------------

#[test]
fn backward_examples() {
    let tape = Tape::new();
    let x = tape.param(Tensor::full(&[2, 3, 2], 0.3));
    tape.backward(x.sum()).unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), &[1.0; 12]);

    let tape = Tape::new();
    let x = tape.param(t(&[2], &[1.0, 2.0]));
    tape.backward(x.mul(x).unwrap().sum()).unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 4.0]);
}

#[test]
fn backward_contract_errors() {
    let tape = Tape::new();
    let x = tape.param(t(&[2], &[1.0, 2.0]));
    assert!(matches!(tape.backward(x.relu()), Err(Error::Contract(_))));
    let loss = x.sum();
    tape.backward(loss).unwrap();
    assert!(matches!(tape.backward(loss), Err(Error::Contract(_))));
    tape.reset_grads();
    tape.backward(loss).unwrap();
}

#[test]
fn backward_populates_unreached_leaves_with_zeros() {
    let tape = Tape::new();
    let x = tape.param(t(&[2], &[1.0, 2.0]));
    let unused = tape.param(Tensor::ones(&[3]));
    tape.backward(x.sum()).unwrap();
    assert_eq!(tape.grad(unused).unwrap().data(), &[0.0; 3]);
}

#[test]
fn every_op_matches_finite_differences_over_50_seeds() {
    let mut failed = Vec::new();
    for target in tensor_targets() {
        let report = run_target(&target, 50, 1000).unwrap();
        println!(
            "{:<36} checked={:<5} nonsmooth={:<3} max_rel_err={:.2e}",
            report.name, report.outcome.checked, report.outcome.nonsmooth, report.outcome.max_rel_err
        );
        if !report.passed() {
            failed.push(report.name);
        }
    }
    assert!(failed.is_empty(), "failing ops: {failed:?}");
}

// ---- grad_of_grad ------------------------------------------------------

#[test]
fn gradient_penalty_closed_form() {
    let tape = Tape::new();
    let x = tape.param(t(&[2], &[1.0, 2.0]));
    let scalar = x.mul(x).unwrap().sum();
    let gx = tape.grad_of_grad(scalar, &[x]).unwrap()[0];
    assert_eq!(gx.value().data(), &[2.0, 4.0]);
    let penalty = gx.square_norm();
    assert_eq!(penalty.item(), 20.0);
    tape.backward(penalty).unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), &[8.0, 16.0]);
}

#[test]
fn linear_critic_penalty_has_zero_input_gradient() {
    let tape = Tape::new();
    let x = tape.param(t(&[1, 3], &[0.3, -1.2, 2.0]));
    let a = tape.param(t(&[1, 3], &[1.0, 2.0, 2.0]));
    let d = x.linear(a, None).unwrap().sum();
    let gx = tape.grad_of_grad(d, &[x]).unwrap()[0];
    let norm = gx.square_norm().sqrt();
    assert!((norm.item() - 3.0).abs() < 1e-14);
    tape.backward(norm).unwrap();
    assert!(tape.grad(x).unwrap().data().iter().all(|g| *g == 0.0));
    let ga = tape.grad(a).unwrap();
    assert!(rel_err(ga.data(), &[1.0 / 3.0, 2.0 / 3.0, 2.0 / 3.0]) < 1e-14);
}

#[test]
fn grad_of_grad_names_unsupported_op() {
    let tape = Tape::new();
    let x = tape.param(Tensor::ones(&[1, 4, 4]));
    let d = x.max_pool2d(2, 2, 0).unwrap().sum();
    match tape.grad_of_grad(d, &[x]) {
        Err(Error::UnsupportedDoubleBackward(op)) => assert_eq!(op, "max_pool2d"),
        other => panic!("expected unsupported-op error, got {other:?}"),
    }
    let tape = Tape::new();
    let x = tape.param(Tensor::ones(&[3]));
    let d = x.tanh().sum();
    assert!(matches!(
        tape.grad_of_grad(d, &[x]),
        Err(Error::UnsupportedDoubleBackward("tanh"))
    ));
}

#[test]
fn conv_critic_penalty_matches_finite_differences() {
    let cfg = FdConfig { rel_tol: 1e-3, ..FdConfig::default() };
    let mut worst: f64 = 0.0;
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(500 + seed);
        let x = randn(&mut rng, &[1, 6, 6], 1.0);
        let s = randn(&mut rng, &[3], 1.0);
        let w1 = randn(&mut rng, &[4, 1, 3, 3], 0.5);
        let b1 = randn(&mut rng, &[4], 0.1);
        let w2 = randn(&mut rng, &[2, 7, 4, 4], 0.3);
        let head = randn(&mut rng, &[1, 18], 0.3);
        let f = scalar_fn(move |tape, p| {
            let xv = tape.leaf(x.clone(), true);
            let sv = tape.leaf(s.clone(), true);
            let h = xv.conv2d(p[0], Some(p[1]), 1, 1)?.leaky_relu(0.2);
            let rep = sv.spatial_replicate(6, 6)?;
            let h = tape.concat(&[h, rep], 0)?;
            let h = h.conv2d(p[2], None, 2, 1)?.leaky_relu(0.2);
            let d = h.reshape(&[1, 18])?.linear(p[3], None)?.sum();
            let g = tape.grad_of_grad(d, &[xv, sv])?;
            let norm = g[0].square_norm().sqrt().add(g[1].square_norm().sqrt())?;
            Ok(norm.powf(6.0).scale(2.0))
        });
        let out = check(&f, &[w1, b1, w2, head], &cfg, &mut rng).unwrap();
        assert!(out.passed(), "seed {seed}: {out:?}");
        worst = worst.max(out.max_rel_err);
    }
    println!("conv critic penalty max rel err {worst:.2e}");
}

// ---- tape --------------------------------------------------------------

fn run_once(seed: u64) -> (Vec<f64>, Vec<f64>, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = randn(&mut rng, &[2, 5, 5], 1.0);
    let w = randn(&mut rng, &[3, 2, 3, 3], 1.0);
    let tape = Tape::new();
    let xv = tape.constant(x);
    let wv = tape.param(w);
    let y = xv.conv2d(wv, None, 1, 1).unwrap().leaky_relu(0.2).softmax(0).unwrap();
    let loss = y.square_norm();
    tape.backward(loss).unwrap();
    (
        y.value().data().to_vec(),
        tape.grad(wv).unwrap().data().to_vec(),
        tape.dump(),
    )
}

#[test]
fn tape_is_deterministic() {
    let a = run_once(42);
    let b = run_once(42);
    assert_eq!(a.0.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.0.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    assert_eq!(a.1.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.1.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    assert_eq!(a.2, b.2);
}

#[test]
fn tape_dump_lists_records_in_order() {
    let tape = Tape::new();
    let x = tape.param(Tensor::ones(&[2]));
    let _ = x.scale(2.0).sum();
    let dump = tape.dump();
    let lines: Vec<&str> = dump.lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[0].starts_with("0\tleaf"));
    assert!(lines[1].starts_with("1\tscale\tinputs=[0]"));
    assert!(lines[2].contains("sum") && lines[2].contains("shape=[1]"));
    // Every input id precedes its record.
    for line in lines {
        let id: usize = line.split('\t').next().unwrap().parse().unwrap();
        let inputs = line.split("inputs=[").nth(1).unwrap().split(']').next().unwrap();
        for i in inputs.split(", ").filter(|s| !s.is_empty()) {
            assert!(i.parse::<usize>().unwrap() < id);
        }
    }
}

#[test]
fn tensor_rejects_inconsistent_buffers() {
    assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
    assert!(Tensor::new(vec![2, 0], vec![]).is_err());
}
