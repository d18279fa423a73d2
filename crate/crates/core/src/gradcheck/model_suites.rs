//! Finite-difference targets for the network modules and objectives.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::suites::{project, randn, scalar_fn, uniform, Scope, Target, TargetFn};
use super::{check, FdConfig, FdOutcome};
use crate::adversary::{attn_loss, d_loss, g_adv_loss, g_total_loss, recon_loss, DBatch, Discriminator, FeatureExtractor};
use crate::autodiff::{Tape, Var};
use crate::config::{LossConfig, ModelConfig};
use crate::decoder::{CrossAffine, Mcat, Rat, RecurrentState};
use crate::encoder::{Encoder, SmcBlock};
use crate::error::Result;
use crate::mask::MaskMetric;
use crate::model::Generator;
use crate::nn::{Bound, Conv, Init, ParamStore};
use crate::tensor::Tensor;
use crate::text::Vocabulary;

const WORD_DIM: usize = 4;

/// Replaces every parameter with a fresh normal draw so that zero-initialized
/// layers do not hide the gradient of anything upstream.
fn randomize(store: &mut ParamStore, rng: &mut ChaCha8Rng, scale: f64) {
    let entries: Vec<(String, Vec<usize>)> = store.iter().map(|(n, t)| (n.to_string(), t.shape().to_vec())).collect();
    for (name, shape) in entries {
        store.set(&name, randn(rng, &shape, scale)).expect("same shape");
    }
}

fn random_mask(rng: &mut ChaCha8Rng, size: usize, p: f64) -> MaskMetric {
    let cells = (0..size * size).map(|_| u8::from(rng.random_bool(p))).collect();
    MaskMetric::new(size, size, cells).expect("square mask")
}

/// Checks `f` w.r.t. `extras` followed by every parameter in `store`.
fn check_module<F>(f: F, extras: Vec<Tensor>, store: &ParamStore, cfg: &FdConfig, rng: &mut ChaCha8Rng) -> Result<FdOutcome>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>], &Bound<'t>) -> Result<Var<'t>>,
{
    let n = extras.len();
    let mut inputs = extras;
    inputs.extend(store.values().iter().cloned());
    let g = scalar_fn(move |t, v| {
        let p = Bound::from_vars(v[n..].to_vec());
        f(t, &v[..n], &p)
    });
    check(&g, &inputs, cfg, rng)
}

fn build<T>(rng: &mut ChaCha8Rng, scale: f64, make: impl FnOnce(&mut Init<'_>) -> T) -> (T, ParamStore) {
    let mut store = ParamStore::new();
    let mut init_rng = ChaCha8Rng::from_rng(&mut *rng);
    let module = make(&mut Init {
        store: &mut store,
        rng: &mut init_rng,
    });
    randomize(&mut store, rng, scale);
    (module, store)
}

fn smc_target(rng: &mut ChaCha8Rng, cfg: &FdConfig, c_in: usize, c_out: usize, downsample: bool) -> Result<FdOutcome> {
    let (block, store) = build(rng, 0.5, |i| SmcBlock::new(i, "smc", c_in, c_out, downsample));
    let mask = random_mask(rng, 8, 0.4);
    let x = randn(rng, &[c_in, 8, 8], 1.0);
    let side = if downsample { 4 } else { 8 };
    let r = randn(rng, &[c_out, side, side], 1.0);
    check_module(
        move |t, v, p| {
            let (y, _) = block.forward(p, v[0], &mask)?;
            project(t, y, &r)
        },
        vec![x],
        &store,
        cfg,
        rng,
    )
}

fn fd_smc_first(rng: &mut ChaCha8Rng, cfg: &FdConfig) -> Result<FdOutcome> {
    smc_target(rng, cfg, 3, 4, false)
}

fn fd_smc_down(rng: &mut ChaCha8Rng, cfg: &FdConfig) -> Result<FdOutcome> {
    smc_target(rng, cfg, 4, 5, true)
}

fn fd_encoder(rng: &mut ChaCha8Rng, cfg: &FdConfig) -> Result<FdOutcome> {
    let (enc, store) = build(rng, 0.5, |i| Encoder::new(i, &[3, 4, 5], 3).expect("depth 3"));
    let mask = random_mask(rng, 16, 0.3);
    let x = Tensor::from_fn(&[3, 16, 16], |i| if mask.cells()[i % 256] == 1 { 0.0 } else { rng.random_range(-1.0..1.0) });
    let rs: Vec<Tensor> = [(3, 16), (4, 8), (5, 4)].iter().map(|&(c, s)| randn(rng, &[c, s, s], 1.0)).collect();
    check_module(
        move |t, v, p| {
            let pyr = enc.encode(p, v[0], &mask)?;
            let mut acc = t.constant(Tensor::zeros(&[1]));
            for (f, r) in pyr.features[1..].iter().zip(&rs) {
                acc = acc.add(project(t, *f, r)?)?;
            }
            Ok(acc)
        },
        vec![x],
        &store,
        cfg,
        rng,
    )
}

fn fd_rat(rng: &mut ChaCha8Rng, cfg: &FdConfig) -> Result<FdOutcome> {
    let (rat, store) = build(rng, 0.5, |i| Rat::new(i, "rat", WORD_DIM, 3));
    let extras = vec![
        randn(rng, &[3, 4, 4], 1.0),
        randn(rng, &[WORD_DIM], 1.0),
        randn(rng, &[WORD_DIM], 0.5),
        randn(rng, &[WORD_DIM], 0.5),
    ];
    let r = randn(rng, &[3, 4, 4], 1.0);
    let rh = randn(rng, &[WORD_DIM], 1.0);
    check_module(
        move |t, v, p| {
            let state = RecurrentState {
                hidden: v[2],
                cell: v[3],
                step: 1,
            };
            let (y, next) = rat.step(p, v[0], v[1], state, 1)?;
            project(t, y, &r)?.add(project(t, next.hidden, &rh)?)
        },
        extras,
        &store,
        cfg,
        rng,
    )
}

fn fd_cross_affine(rng: &mut ChaCha8Rng, cfg: &FdConfig) -> Result<FdOutcome> {
    let (ca, store) = build(rng, 0.5, |i| CrossAffine::new(i, "ca", WORD_DIM, 3));
    let extras = vec![
        randn(rng, &[3, 4, 4], 1.0),
        randn(rng, &[WORD_DIM], 1.0),
        randn(rng, &[3, WORD_DIM], 1.0),
    ];
    let r = randn(rng, &[3, 4, 4], 1.0);
    let rq = randn(rng, &[16, WORD_DIM], 1.0);
    check_module(
        move |t, v, p| {
            let o = ca.forward(p, v[0], v[1], v[2])?;
            project(t, o.out, &r)?.add(project(t, o.queries, &rq)?)
        },
        extras,
        &store,
        cfg,
        rng,
    )
}

fn fd_mcat(rng: &mut ChaCha8Rng, cfg: &FdConfig) -> Result<FdOutcome> {
    let (mcat, store) = build(rng, 0.5, |i| Mcat {
        affine: CrossAffine::new(i, "m.affine", WORD_DIM, 3),
        conv: Conv::new(i, "m.conv", 3, 3, 3, 1, 1, true),
        prev_proj: Some(Conv::new(i, "m.prev", 4, 3, 1, 1, 0, true)),
    });
    let extras = vec![
        randn(rng, &[3, 4, 4], 1.0),
        randn(rng, &[WORD_DIM], 1.0),
        randn(rng, &[2, WORD_DIM], 1.0),
        randn(rng, &[4, 2, 2], 1.0),
    ];
    let r = randn(rng, &[3, 4, 4], 1.0);
    check_module(
        move |t, v, p| project(t, mcat.forward(p, v[0], v[1], v[2], Some(v[3]))?.out, &r),
        extras,
        &store,
        cfg,
        rng,
    )
}

fn small_model_config() -> ModelConfig {
    ModelConfig {
        image_size: 16,
        depth: 3,
        word_dim: WORD_DIM,
        noise_dim: 4,
        enc_channels: vec![3, 4, 5],
        dec_channels: vec![5, 4, 3],
        disc_channels: vec![3, 4, 4],
        init_seed: 0,
        feature_seed: 0,
    }
}

/// Whole generator at 16 px with three blocks: text encoder, encoder,
/// decoder and compositing, checked w.r.t. the masked input, the noise and
/// every parameter.
fn fd_generator(rng: &mut ChaCha8Rng, cfg: &FdConfig) -> Result<FdOutcome> {
    let mc = small_model_config();
    let vocab = Vocabulary::default();
    let (gen, store) = build(rng, 0.4, |i| Generator::new(i, &mc, &vocab).expect("valid config"));
    let mask = random_mask(rng, 16, 0.3);
    let keep = mask.keep_tensor(3);
    let masked = Tensor::from_fn(&[3, 16, 16], |i| keep.data()[i] * rng.random_range(-1.0..1.0));
    let z = randn(rng, &[4], 1.0);
    let tokens = vocab.tokenize("large red circle center");
    let r = randn(rng, &[3, 16, 16], 1.0);
    let cfg = FdConfig {
        coords_per_input: 2,
        ..*cfg
    };
    check_module(
        move |t, v, p| project(t, gen.forward_vars(p, v[0], &mask, v[1], &tokens)?.composited, &r),
        vec![masked, z],
        &store,
        &cfg,
        rng,
    )
}

fn small_disc(rng: &mut ChaCha8Rng) -> (Discriminator, ParamStore) {
    build(rng, 0.4, |i| Discriminator::new(i, &[3, 4, 4], WORD_DIM, 16).expect("16 px"))
}

fn fd_discriminator(rng: &mut ChaCha8Rng, cfg: &FdConfig) -> Result<FdOutcome> {
    let (disc, store) = small_disc(rng);
    let extras = vec![uniform(rng, &[3, 16, 16], -1.0, 1.0), randn(rng, &[WORD_DIM], 1.0)];
    check_module(
        move |_, v, p| disc.forward(p, v[0], v[1]),
        extras,
        &store,
        cfg,
        rng,
    )
}

fn fd_g_adv(rng: &mut ChaCha8Rng, cfg: &FdConfig) -> Result<FdOutcome> {
    let (disc, store) = small_disc(rng);
    let extras = vec![uniform(rng, &[3, 16, 16], -1.0, 1.0), uniform(rng, &[3, 16, 16], -1.0, 1.0)];
    let sents = [randn(rng, &[WORD_DIM], 1.0), randn(rng, &[WORD_DIM], 1.0)];
    check_module(
        move |t, v, p| {
            let critic = disc.bind(p);
            let s: Vec<_> = sents.iter().map(|s| t.constant(s.clone())).collect();
            g_adv_loss(&critic, &v[..2], &s)
        },
        extras,
        &store,
        cfg,
        rng,
    )
}

fn fd_recon(rng: &mut ChaCha8Rng, cfg: &FdConfig) -> Result<FdOutcome> {
    let fe = FeatureExtractor::seeded(rng.random());
    let x = uniform(rng, &[3, 8, 8], -1.0, 1.0);
    let y = uniform(rng, &[3, 8, 8], -1.0, 1.0);
    check(
        &scalar_fn(move |t, v| {
            let p = fe.bind(t);
            recon_loss(&fe, &p, v[0], v[1])
        }),
        &[x, y],
        cfg,
        rng,
    )
}

fn fd_attention_loss(rng: &mut ChaCha8Rng, cfg: &FdConfig) -> Result<FdOutcome> {
    let map = uniform(rng, &[1, 6, 6], 0.0, 1.0);
    let x = uniform(rng, &[3, 6, 6], -1.0, 1.0);
    let y = uniform(rng, &[3, 6, 6], -1.0, 1.0);
    check(
        &scalar_fn(move |_, v| attn_loss(&map, v[0], v[1])),
        &[x, y],
        cfg,
        rng,
    )
}

fn fd_g_total(rng: &mut ChaCha8Rng, cfg: &FdConfig) -> Result<FdOutcome> {
    let loss = LossConfig {
        lambda_rec: 0.2,
        lambda_damsm: 0.01,
        gp_k: 2.0,
        gp_p: 6.0,
    };
    let parts: Vec<Tensor> = (0..4).map(|_| uniform(rng, &[1], -2.0, 2.0)).collect();
    check(
        &scalar_fn(move |_, v| g_total_loss(v[0], v[1], v[2], v[3], &loss)),
        &parts,
        cfg,
        rng,
    )
}

/// Discriminator objective w.r.t. its parameters; `gp_k = 0` isolates the
/// hinge terms, the penalty has its own target.
fn d_objective(rng: &mut ChaCha8Rng, cfg: &FdConfig, loss: LossConfig) -> Result<FdOutcome> {
    let (disc, store) = small_disc(rng);
    let img = |rng: &mut ChaCha8Rng| uniform(rng, &[3, 16, 16], -1.0, 1.0);
    let real = vec![img(rng), img(rng)];
    let fake = vec![img(rng), img(rng)];
    let sentences = vec![randn(rng, &[WORD_DIM], 1.0), randn(rng, &[WORD_DIM], 1.0)];
    let mismatched = vec![sentences[1].clone(), sentences[0].clone()];
    check_module(
        move |t, _, p| {
            let critic = disc.bind(p);
            let batch = DBatch {
                real: &real,
                fake: &fake,
                sentences: &sentences,
                mismatched: Some(&mismatched),
            };
            Ok(d_loss(t, &critic, &batch, &loss)?.total)
        },
        Vec::new(),
        &store,
        cfg,
        rng,
    )
}

fn fd_d_hinge(rng: &mut ChaCha8Rng, cfg: &FdConfig) -> Result<FdOutcome> {
    let loss = LossConfig {
        lambda_rec: 0.2,
        lambda_damsm: 0.01,
        gp_k: 0.0,
        gp_p: 6.0,
    };
    d_objective(rng, cfg, loss)
}

fn fd_magp(rng: &mut ChaCha8Rng, cfg: &FdConfig) -> Result<FdOutcome> {
    let loss = LossConfig {
        lambda_rec: 0.2,
        lambda_damsm: 0.01,
        gp_k: 2.0,
        gp_p: 6.0,
    };
    d_objective(rng, cfg, loss)
}

pub fn model_targets() -> Vec<Target> {
    let t = |name, scope, run| Target {
        name,
        scope,
        rel_tol: 1e-4,
        run,
    };
    vec![
        t("smc_block/first", Scope::Encoder, fd_smc_first as TargetFn),
        t("smc_block/downsample", Scope::Encoder, fd_smc_down),
        t("encoder/16px", Scope::Encoder, fd_encoder),
        t("rat_step", Scope::Decoder, fd_rat),
        t("cross_affine", Scope::Decoder, fd_cross_affine),
        t("mcat", Scope::Decoder, fd_mcat),
        t("generator/16px", Scope::Decoder, fd_generator),
        t("discriminator", Scope::Adversary, fd_discriminator),
        t("loss/generator_adversarial", Scope::Adversary, fd_g_adv),
        t("loss/reconstruction", Scope::Adversary, fd_recon),
        t("loss/attention", Scope::Adversary, fd_attention_loss),
        t("loss/generator_total", Scope::Adversary, fd_g_total),
        t("loss/discriminator_hinge", Scope::Adversary, fd_d_hinge),
        Target {
            name: "loss/discriminator_magp",
            scope: Scope::Magp,
            rel_tol: 1e-3,
            run: fd_magp,
        },
    ]
}
