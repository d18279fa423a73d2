//! Named finite-difference targets grouped by scope.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{check, FdConfig, FdOutcome};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scope {
    Tensor,
    Encoder,
    Decoder,
    Adversary,
    Magp,
    All,
}

impl FromStr for Scope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "tensor" => Scope::Tensor,
            "encoder" => Scope::Encoder,
            "decoder" => Scope::Decoder,
            "adversary" => Scope::Adversary,
            "magp" => Scope::Magp,
            "all" => Scope::All,
            other => {
                return Err(Error::Config(format!(
                    "unknown grad-check scope `{other}` (expected tensor, encoder, decoder, adversary, magp or all)"
                )))
            }
        })
    }
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Scope::Tensor => "tensor",
            Scope::Encoder => "encoder",
            Scope::Decoder => "decoder",
            Scope::Adversary => "adversary",
            Scope::Magp => "magp",
            Scope::All => "all",
        };
        f.write_str(s)
    }
}

pub type TargetFn = fn(&mut ChaCha8Rng, &FdConfig) -> Result<FdOutcome>;

#[derive(Clone, Copy)]
pub struct Target {
    pub name: &'static str,
    pub scope: Scope,
    pub rel_tol: f64,
    pub run: TargetFn,
}

#[derive(Debug, Clone)]
pub struct TargetReport {
    pub name: &'static str,
    pub scope: Scope,
    pub rel_tol: f64,
    pub seeds: usize,
    pub outcome: FdOutcome,
}

impl TargetReport {
    pub fn passed(&self) -> bool {
        self.outcome.passed()
    }
}

pub fn randn(rng: &mut impl Rng, shape: &[usize], scale: f64) -> Tensor {
    Tensor::from_fn(shape, |_| scale * rng.sample::<f64, _>(StandardNormal))
}

pub fn uniform(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// `sum(y * r)` for a fixed random `r`, so every output element carries a
/// distinct weight into the checked scalar.
pub fn project<'t>(tape: &'t Tape, y: Var<'t>, r: &Tensor) -> Result<Var<'t>> {
    y.mul(tape.constant(r.clone()))?.sum().reshape(&[1])
}

/// Pins a closure to the higher-ranked signature the checker expects.
pub fn scalar_fn<F>(f: F) -> F
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    f
}

macro_rules! unary_target {
    ($name:ident, $shape:expr, $lo:expr, $hi:expr, |$v:ident| $body:expr) => {
        fn $name(rng: &mut ChaCha8Rng, cfg: &FdConfig) -> Result<FdOutcome> {
            let x = uniform(rng, &$shape, $lo, $hi);
            let out_shape = {
                let tape = Tape::new();
                let $v = tape.constant(x.clone());
                let y: Var<'_> = $body;
                y.shape()
            };
            let r = randn(rng, &out_shape, 1.0);
            check(
                &move |t: &Tape, vs: &[Var<'_>]| {
                    let $v = vs[0];
                    let y: Var<'_> = $body;
                    project(t, y, &r)
                },
                &[x],
                cfg,
                rng,
            )
        }
    };
}

unary_target!(fd_relu, [3, 4], -1.0, 1.0, |x| x.relu());
unary_target!(fd_leaky_relu, [3, 4], -1.0, 1.0, |x| x.leaky_relu(0.2));
unary_target!(fd_tanh, [3, 4], -2.0, 2.0, |x| x.tanh());
unary_target!(fd_sigmoid, [3, 4], -3.0, 3.0, |x| x.sigmoid());
unary_target!(fd_abs, [3, 4], -1.0, 1.0, |x| x.abs());
unary_target!(fd_exp, [3, 4], -1.0, 1.0, |x| x.exp());
unary_target!(fd_pow, [3, 4], 0.5, 2.0, |x| x.powf(2.5));
unary_target!(fd_sqrt, [3, 4], 0.2, 3.0, |x| x.sqrt());
unary_target!(fd_scale, [5], -1.0, 1.0, |x| x.scale(-1.7).add_scalar(0.3));
unary_target!(fd_sum, [2, 3, 2], -1.0, 1.0, |x| x.sum());
unary_target!(fd_mean, [2, 3, 2], -1.0, 1.0, |x| x.mean());
unary_target!(fd_square_norm, [7], -1.0, 1.0, |x| x.square_norm());
unary_target!(fd_sum_axis, [2, 3, 4], -1.0, 1.0, |x| x.sum_axis(1)?);
unary_target!(fd_softmax, [3, 5], -3.0, 3.0, |x| x.softmax(1)?);
unary_target!(fd_softmax_axis0, [4, 2, 3], -3.0, 3.0, |x| x.softmax(0)?);
unary_target!(fd_upsample, [2, 3, 3], -1.0, 1.0, |x| x.upsample_nearest2x()?);
unary_target!(fd_max_pool, [2, 6, 6], -1.0, 1.0, |x| x.max_pool2d(3, 2, 1)?);
unary_target!(fd_transpose, [3, 5], -1.0, 1.0, |x| x.transpose()?);
unary_target!(fd_reshape, [2, 6], -1.0, 1.0, |x| x.reshape(&[3, 4])?);
unary_target!(fd_slice, [2, 5, 3], -1.0, 1.0, |x| x.slice(1, 1, 3)?);
unary_target!(fd_replicate, [4], -1.0, 1.0, |x| x.spatial_replicate(3, 2)?);
unary_target!(fd_channel_sum, [3, 2, 4], -1.0, 1.0, |x| x.channel_sum()?);
unary_target!(fd_embedding, [5, 3], -1.0, 1.0, |x| x.embedding(&[4, 0, 4, 2])?);

fn fd_binary(rng: &mut ChaCha8Rng, cfg: &FdConfig) -> Result<FdOutcome> {
    let a = uniform(rng, &[3, 4], -1.0, 1.0);
    let b = uniform(rng, &[3, 4], -1.0, 1.0);
    let s = uniform(rng, &[1], 0.5, 1.5);
    let r = randn(rng, &[3, 4], 1.0);
    check(
        &move |t: &Tape, v: &[Var<'_>]| {
            let y = v[0].mul(v[1])?.add(v[0])?.sub(v[1].mul(v[2])?)?.add(v[2])?;
            project(t, y, &r)
        },
        &[a, b, s],
        cfg,
        rng,
    )
}

fn fd_conv2d_same(rng: &mut ChaCha8Rng, cfg: &FdConfig) -> Result<FdOutcome> {
    let x = randn(rng, &[2, 5, 5], 1.0);
    let w = randn(rng, &[3, 2, 3, 3], 0.5);
    let b = randn(rng, &[3], 0.5);
    let r = randn(rng, &[3, 5, 5], 1.0);
    check(
        &move |t: &Tape, v: &[Var<'_>]| project(t, v[0].conv2d(v[1], Some(v[2]), 1, 1)?, &r),
        &[x, w, b],
        cfg,
        rng,
    )
}

fn fd_conv2d_down(rng: &mut ChaCha8Rng, cfg: &FdConfig) -> Result<FdOutcome> {
    let x = randn(rng, &[2, 8, 8], 1.0);
    let w = randn(rng, &[3, 2, 4, 4], 0.5);
    let b = randn(rng, &[3], 0.5);
    let r = randn(rng, &[3, 4, 4], 1.0);
    check(
        &move |t: &Tape, v: &[Var<'_>]| project(t, v[0].conv2d(v[1], Some(v[2]), 2, 1)?, &r),
        &[x, w, b],
        cfg,
        rng,
    )
}

fn fd_linear(rng: &mut ChaCha8Rng, cfg: &FdConfig) -> Result<FdOutcome> {
    let x = randn(rng, &[3, 4], 1.0);
    let w = randn(rng, &[5, 4], 0.5);
    let b = randn(rng, &[5], 0.5);
    let r = randn(rng, &[3, 5], 1.0);
    check(
        &move |t: &Tape, v: &[Var<'_>]| project(t, v[0].linear(v[1], Some(v[2]))?, &r),
        &[x, w, b],
        cfg,
        rng,
    )
}

fn fd_matmul(rng: &mut ChaCha8Rng, cfg: &FdConfig) -> Result<FdOutcome> {
    let a = randn(rng, &[3, 4], 1.0);
    let b = randn(rng, &[4, 2], 1.0);
    let r = randn(rng, &[3, 2], 1.0);
    check(
        &move |t: &Tape, v: &[Var<'_>]| project(t, v[0].matmul(v[1])?, &r),
        &[a, b],
        cfg,
        rng,
    )
}

fn fd_concat(rng: &mut ChaCha8Rng, cfg: &FdConfig) -> Result<FdOutcome> {
    let a = randn(rng, &[2, 3, 2], 1.0);
    let b = randn(rng, &[1, 3, 2], 1.0);
    let r = randn(rng, &[3, 3, 2], 1.0);
    check(
        &move |t: &Tape, v: &[Var<'_>]| project(t, t.concat(&[v[0], v[1]], 0)?, &r),
        &[a, b],
        cfg,
        rng,
    )
}

fn fd_channel_affine(rng: &mut ChaCha8Rng, cfg: &FdConfig) -> Result<FdOutcome> {
    let x = randn(rng, &[3, 2, 3], 1.0);
    let g = randn(rng, &[3], 1.0);
    let b = randn(rng, &[3], 1.0);
    let r = randn(rng, &[3, 2, 3], 1.0);
    check(
        &move |t: &Tape, v: &[Var<'_>]| project(t, v[0].channel_affine(v[1], v[2])?, &r),
        &[x, g, b],
        cfg,
        rng,
    )
}

fn fd_region_normalize(rng: &mut ChaCha8Rng, cfg: &FdConfig) -> Result<FdOutcome> {
    let x = randn(rng, &[2, 4, 4], 1.0);
    let invalid: Vec<bool> = (0..16).map(|_| rng.random_bool(0.4)).collect();
    let r = randn(rng, &[2, 4, 4], 1.0);
    check(
        &move |t: &Tape, v: &[Var<'_>]| project(t, v[0].region_normalize(&invalid, 1e-5)?, &r),
        &[x],
        cfg,
        rng,
    )
}

/// Gradient-norm penalty through a conv + leaky-relu + linear critic,
/// differentiated w.r.t. the critic weights (the double-backward path).
fn fd_double_backward(rng: &mut ChaCha8Rng, cfg: &FdConfig) -> Result<FdOutcome> {
    let x = randn(rng, &[2, 4, 4], 1.0);
    let w = randn(rng, &[3, 2, 3, 3], 0.5);
    let b = randn(rng, &[3], 0.5);
    let head = randn(rng, &[1, 12], 0.5);
    let cfg = FdConfig {
        rel_tol: cfg.rel_tol.max(1e-3),
        ..*cfg
    };
    let f = scalar_fn(move |t, v| {
        let xv = t.leaf(x.clone(), true);
        let h = xv.conv2d(v[0], Some(v[1]), 2, 1)?.leaky_relu(0.2);
        let d = h.reshape(&[12])?.linear(v[2], None)?.sum();
        let gx = t.grad_of_grad(d, &[xv])?[0];
        Ok(gx.square_norm().sqrt().powf(3.0).scale(2.0))
    });
    check(&f, &[w, b, head], &cfg, rng)
}

const T: Scope = Scope::Tensor;

pub fn tensor_targets() -> Vec<Target> {
    let t = |name, run| Target {
        name,
        scope: T,
        rel_tol: 1e-4,
        run,
    };
    vec![
        t("conv2d/k3s1p1", fd_conv2d_same as TargetFn),
        t("conv2d/k4s2p1", fd_conv2d_down),
        t("max_pool2d", fd_max_pool),
        t("linear", fd_linear),
        t("matmul", fd_matmul),
        t("softmax", fd_softmax),
        t("softmax/axis0", fd_softmax_axis0),
        t("add_sub_mul/broadcast", fd_binary),
        t("scale_add_scalar", fd_scale),
        t("relu", fd_relu),
        t("leaky_relu", fd_leaky_relu),
        t("tanh", fd_tanh),
        t("sigmoid", fd_sigmoid),
        t("abs", fd_abs),
        t("exp", fd_exp),
        t("power", fd_pow),
        t("sqrt", fd_sqrt),
        t("sum", fd_sum),
        t("mean", fd_mean),
        t("sum_axis", fd_sum_axis),
        t("square_norm", fd_square_norm),
        t("upsample_nearest2x", fd_upsample),
        t("concat", fd_concat),
        t("slice", fd_slice),
        t("transpose", fd_transpose),
        t("reshape", fd_reshape),
        t("spatial_replicate", fd_replicate),
        t("channel_sum", fd_channel_sum),
        t("channel_affine", fd_channel_affine),
        t("mask_normalize", fd_region_normalize),
        t("embedding", fd_embedding),
        Target {
            name: "grad_of_grad/conv_lrelu_penalty",
            scope: T,
            rel_tol: 1e-3,
            run: fd_double_backward,
        },
    ]
}

pub fn targets(scope: Scope) -> Vec<Target> {
    let all: Vec<Target> = tensor_targets()
        .into_iter()
        .chain(super::model_suites::model_targets())
        .collect();
    match scope {
        Scope::All => all,
        s => all.into_iter().filter(|t| t.scope == s).collect(),
    }
}

/// Runs one target over `seeds` independent random draws.
pub fn run_target(target: &Target, seeds: usize, base_seed: u64) -> Result<TargetReport> {
    let cfg = FdConfig {
        rel_tol: target.rel_tol,
        ..FdConfig::default()
    };
    let mut outcome = FdOutcome::default();
    for s in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(base_seed.wrapping_add(s as u64 * 7919));
        outcome.merge(&(target.run)(&mut rng, &cfg)?);
    }
    Ok(TargetReport {
        name: target.name,
        scope: target.scope,
        rel_tol: target.rel_tol,
        seeds,
        outcome,
    })
}

pub fn run_scope(scope: Scope, seeds: usize, base_seed: u64) -> Result<Vec<TargetReport>> {
    targets(scope)
        .iter()
        .map(|t| run_target(t, seeds, base_seed))
        .collect()
}
