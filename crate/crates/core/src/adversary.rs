//! Sentence-conditioned discriminator and the training objectives.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::config::LossConfig;
use crate::error::{Error, Result};
use crate::nn::{Bound, Conv, Init, ParamStore, LEAK};
use crate::tensor::Tensor;

/// Anything scoring an (image, sentence) pair with a one-element var.
pub trait Critic<'t> {
    fn score(&self, image: Var<'t>, sentence: Var<'t>) -> Result<Var<'t>>;
}

impl<'t, F> Critic<'t> for F
where
    F: Fn(Var<'t>, Var<'t>) -> Result<Var<'t>>,
{
    fn score(&self, image: Var<'t>, sentence: Var<'t>) -> Result<Var<'t>> {
        self(image, sentence)
    }
}

/// Strided convolutions down to 4x4, then the sentence is replicated over
/// the 4x4 grid, concatenated on channels and read out by two convolutions.
#[derive(Debug, Clone)]
pub struct Discriminator {
    pub stem: Conv,
    pub downs: Vec<Conv>,
    pub joint: Conv,
    pub head: Conv,
    pub image_size: usize,
}

impl Discriminator {
    pub fn new(init: &mut Init<'_>, channels: &[usize], word_dim: usize, image_size: usize) -> Result<Self> {
        let Some(&c0) = channels.first() else {
            return Err(Error::Config("discriminator needs at least one width".into()));
        };
        if image_size != 4usize << (channels.len() - 1) {
            return Err(Error::Config(format!(
                "discriminator with {} widths cannot reduce {image_size}px to 4x4",
                channels.len()
            )));
        }
        let stem = Conv::new(init, "disc.stem", 3, c0, 3, 1, 1, true);
        let downs = channels
            .windows(2)
            .enumerate()
            .map(|(i, w)| Conv::new(init, &format!("disc.down.{i}"), w[0], w[1], 4, 2, 1, true))
            .collect();
        let c = *channels.last().unwrap();
        let joint = Conv::new(init, "disc.joint", c + word_dim, c, 3, 1, 1, true);
        let head = Conv::new(init, "disc.head", c, 1, 4, 1, 0, true);
        Ok(Self {
            stem,
            downs,
            joint,
            head,
            image_size,
        })
    }

    pub fn bind<'a, 't>(&'a self, params: &'a Bound<'t>) -> BoundDiscriminator<'a, 't> {
        BoundDiscriminator { disc: self, params }
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, image: Var<'t>, sentence: Var<'t>) -> Result<Var<'t>> {
        let tape = image.tape();
        let mut h = self.stem.forward(p, image)?.leaky_relu(LEAK);
        for d in &self.downs {
            h = d.forward(p, h)?.leaky_relu(LEAK);
        }
        let s = h.shape();
        let cond = sentence.spatial_replicate(s[1], s[2])?;
        let h = tape.concat(&[h, cond], 0)?;
        let h = self.joint.forward(p, h)?.leaky_relu(LEAK);
        self.head.forward(p, h)?.reshape(&[1])
    }
}

pub struct BoundDiscriminator<'a, 't> {
    disc: &'a Discriminator,
    params: &'a Bound<'t>,
}

impl<'t> Critic<'t> for BoundDiscriminator<'_, 't> {
    fn score(&self, image: Var<'t>, sentence: Var<'t>) -> Result<Var<'t>> {
        self.disc.forward(self.params, image, sentence)
    }
}

/// Frozen convolution pyramid standing in for a pretrained perceptual
/// network.
#[derive(Debug, Clone)]
pub struct FeatureExtractor {
    pub store: ParamStore,
    pub layers: Vec<(Conv, bool)>,
    pub weights: Vec<f64>,
}

impl FeatureExtractor {
    /// 3 -> 8 -> 16 -> 32 channels, the last two layers halving resolution,
    /// leaky relu after each, equal layer weights.
    pub fn seeded(seed: u64) -> Self {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init {
            store: &mut store,
            rng: &mut rng,
        };
        let layers = vec![
            (Conv::new(&mut init, "fe.0", 3, 8, 3, 1, 1, true), true),
            (Conv::new(&mut init, "fe.1", 8, 16, 4, 2, 1, true), true),
            (Conv::new(&mut init, "fe.2", 16, 32, 4, 2, 1, true), true),
        ];
        Self {
            store,
            layers,
            weights: vec![1.0 / 3.0; 3],
        }
    }

    /// A single identity layer with unit weight.
    pub fn identity(channels: usize) -> Self {
        let mut store = ParamStore::new();
        let eye = Tensor::from_fn(&[channels, channels, 1, 1], |i| {
            if i / channels == i % channels {
                1.0
            } else {
                0.0
            }
        });
        let weight = store.add("fe.identity.weight", eye);
        let conv = Conv {
            weight,
            bias: None,
            stride: 1,
            padding: 0,
        };
        Self {
            store,
            layers: vec![(conv, false)],
            weights: vec![1.0],
        }
    }

    pub fn bind<'t>(&self, tape: &'t Tape) -> Bound<'t> {
        self.store.bind(tape, false)
    }

    pub fn features<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Vec<Var<'t>>> {
        let mut out = Vec::with_capacity(self.layers.len());
        let mut h = x;
        for (conv, act) in &self.layers {
            h = conv.forward(p, h)?;
            if *act {
                h = h.leaky_relu(LEAK);
            }
            out.push(h);
        }
        Ok(out)
    }
}

/// Weighted sum over layers of the L2 distance between activations.
pub fn recon_loss<'t>(
    fe: &FeatureExtractor,
    p: &Bound<'t>,
    generated: Var<'t>,
    target: Var<'t>,
) -> Result<Var<'t>> {
    let a = fe.features(p, generated)?;
    let b = fe.features(p, target)?;
    let mut total: Option<Var<'t>> = None;
    for ((fa, fb), &w) in a.iter().zip(&b).zip(&fe.weights) {
        let term = fa.sub(*fb)?.square_norm().sqrt().scale(w);
        total = Some(match total {
            Some(t) => t.add(term)?,
            None => term,
        });
    }
    total.ok_or_else(|| Error::Contract("feature extractor has no layers".into()))
}

/// Per-pixel map in [0, 1]: each word's attention is a softmax over
/// pixels, the map keeps the strongest word per pixel and is rescaled by
/// its maximum. `queries` is `[H*W, d_w]`, `words` `[L_w, d_w]`.
pub fn attention_map(queries: &Tensor, words: &Tensor, height: usize, width: usize) -> Result<Tensor> {
    let (n, d) = (queries.shape()[0], queries.shape()[1]);
    if n != height * width || words.ndim() != 2 || words.shape()[1] != d {
        return Err(Error::Shape {
            op: "attention_map",
            detail: format!("queries {:?}, words {:?}, {height}x{width}", queries.shape(), words.shape()),
        });
    }
    let lw = words.shape()[0];
    let mut best = vec![0.0f64; n];
    for l in 0..lw {
        let w = &words.data()[l * d..(l + 1) * d];
        let logits: Vec<f64> = queries
            .data()
            .chunks_exact(d)
            .map(|q| q.iter().zip(w).map(|(a, b)| a * b).sum())
            .collect();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        for (b, e) in best.iter_mut().zip(&exps) {
            *b = b.max(e / z);
        }
    }
    let top = best.iter().copied().fold(0.0, f64::max);
    if top > 0.0 {
        best.iter_mut().for_each(|v| *v /= top);
    }
    Tensor::new(vec![1, height, width], best)
}

/// `sum |A * generated - A * target|` with the map held constant.
pub fn attn_loss<'t>(map: &Tensor, generated: Var<'t>, target: Var<'t>) -> Result<Var<'t>> {
    let tape = generated.tape();
    let s = generated.shape();
    if map.numel() != s[1] * s[2] {
        return Err(Error::Shape {
            op: "attn_loss",
            detail: format!("map {:?} vs image {s:?}", map.shape()),
        });
    }
    let area = map.numel();
    let a = tape.constant(Tensor::from_fn(&s, |i| map.data()[i % area]));
    generated.mul(a)?.sub(target.mul(a)?)?.abs().sum().reshape(&[1])
}

/// Stand-in for the pretrained text-image matching loss; always 0.
pub fn damsm_loss(tape: &Tape) -> Var<'_> {
    tape.constant(Tensor::scalar(0.0))
}

/// `-mean D(generated, sentence)`.
pub fn g_adv_loss<'t>(
    critic: &impl Critic<'t>,
    generated: &[Var<'t>],
    sentences: &[Var<'t>],
) -> Result<Var<'t>> {
    if generated.is_empty() || generated.len() != sentences.len() {
        return Err(Error::Contract("g_adv_loss needs one sentence per image".into()));
    }
    let scores = generated
        .iter()
        .zip(sentences)
        .map(|(x, s)| critic.score(*x, *s))
        .collect::<Result<Vec<_>>>()?;
    Ok(mean(&scores)?.neg())
}

/// `lambda_rec * rec + adv + attn + lambda_damsm * damsm`.
pub fn g_total_loss<'t>(
    rec: Var<'t>,
    adv: Var<'t>,
    attn: Var<'t>,
    damsm: Var<'t>,
    cfg: &LossConfig,
) -> Result<Var<'t>> {
    rec.scale(cfg.lambda_rec)
        .add(adv)?
        .add(attn)?
        .add(damsm.scale(cfg.lambda_damsm))
}

pub fn mean<'t>(xs: &[Var<'t>]) -> Result<Var<'t>> {
    let Some(first) = xs.first() else {
        return Err(Error::Contract("mean of an empty batch".into()));
    };
    let mut acc = *first;
    for x in &xs[1..] {
        acc = acc.add(*x)?;
    }
    Ok(acc.scale(1.0 / xs.len() as f64))
}

/// Batch inputs of the discriminator objective. Images and sentences are
/// plain values: nothing here is connected to the generator's tape.
pub struct DBatch<'a> {
    pub real: &'a [Tensor],
    pub fake: &'a [Tensor],
    pub sentences: &'a [Tensor],
    pub mismatched: Option<&'a [Tensor]>,
}

pub struct DLoss<'t> {
    pub real: Var<'t>,
    pub fake: Var<'t>,
    pub mismatch: Var<'t>,
    pub penalty: Var<'t>,
    pub total: Var<'t>,
}

/// Hinge terms on matched real, generated and mismatched-text pairs plus
/// the gradient-norm penalty at matched real pairs.
pub fn d_loss<'t>(
    tape: &'t Tape,
    critic: &impl Critic<'t>,
    batch: &DBatch<'_>,
    cfg: &LossConfig,
) -> Result<DLoss<'t>> {
    let Some(mismatched) = batch.mismatched else {
        return Err(Error::Contract(
            "discriminator loss requires mismatched sentences".into(),
        ));
    };
    let n = batch.real.len();
    if n == 0 || batch.fake.len() != n || batch.sentences.len() != n || mismatched.len() != n {
        return Err(Error::Contract(format!(
            "discriminator batch sizes differ: real {n}, fake {}, sentences {}, mismatched {}",
            batch.fake.len(),
            batch.sentences.len(),
            mismatched.len()
        )));
    }
    let mut real_terms = Vec::with_capacity(n);
    let mut fake_terms = Vec::with_capacity(n);
    let mut mis_terms = Vec::with_capacity(n);
    let mut penalties = Vec::with_capacity(n);
    for b in 0..n {
        let x = tape.leaf(batch.real[b].clone(), true);
        let s = tape.leaf(batch.sentences[b].clone(), true);
        let d_real = critic.score(x, s)?;
        real_terms.push(d_real.neg().add_scalar(1.0).relu());
        let grads = tape.grad_of_grad(d_real, &[x, s])?;
        let norm = grads[0].square_norm().sqrt().add(grads[1].square_norm().sqrt())?;
        penalties.push(norm.powf(cfg.gp_p));

        let fake = tape.constant(batch.fake[b].clone());
        let d_fake = critic.score(fake, tape.constant(batch.sentences[b].clone()))?;
        fake_terms.push(d_fake.add_scalar(1.0).relu().scale(0.5));

        let x_const = tape.constant(batch.real[b].clone());
        let d_mis = critic.score(x_const, tape.constant(mismatched[b].clone()))?;
        mis_terms.push(d_mis.add_scalar(1.0).relu().scale(0.5));
    }
    let real = mean(&real_terms)?;
    let fake = mean(&fake_terms)?;
    let mismatch = mean(&mis_terms)?;
    let penalty = mean(&penalties)?.scale(cfg.gp_k);
    let total = real.add(fake)?.add(mismatch)?.add(penalty)?;
    Ok(DLoss {
        real,
        fake,
        mismatch,
        penalty,
        total,
    })
}

/// Named scalar components of one training step.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossReport {
    pub d_real: f64,
    pub d_fake: f64,
    pub d_mismatch: f64,
    pub d_penalty: f64,
    pub d_total: f64,
    pub g_rec: f64,
    pub g_adv: f64,
    pub g_attn: f64,
    pub g_damsm: f64,
    pub g_total: f64,
}

impl LossReport {
    pub const CSV_HEADER: &'static str =
        "step,d_total,g_total,d_real,d_fake,d_mismatch,d_penalty,g_rec,g_adv,g_attn,g_damsm";

    pub fn components(&self) -> [(&'static str, f64); 10] {
        [
            ("d_real", self.d_real),
            ("d_fake", self.d_fake),
            ("d_mismatch", self.d_mismatch),
            ("d_penalty", self.d_penalty),
            ("d_total", self.d_total),
            ("g_rec", self.g_rec),
            ("g_adv", self.g_adv),
            ("g_attn", self.g_attn),
            ("g_damsm", self.g_damsm),
            ("g_total", self.g_total),
        ]
    }

    /// First non-finite component, if any.
    pub fn non_finite(&self) -> Option<&'static str> {
        self.components()
            .into_iter()
            .find(|(_, v)| !v.is_finite())
            .map(|(n, _)| n)
    }

    pub fn csv_row(&self, step: u64) -> String {
        format!(
            "{step},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{:?}",
            self.d_total,
            self.g_total,
            self.d_real,
            self.d_fake,
            self.d_mismatch,
            self.d_penalty,
            self.g_rec,
            self.g_adv,
            self.g_attn,
            self.g_damsm
        )
    }
}
