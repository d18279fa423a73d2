//! Alternating discriminator / generator optimization.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::masks;
use super::scene::{render_scene, training_seed};
use crate::adversary::{
    attention_map, attn_loss, d_loss, damsm_loss, g_adv_loss, g_total_loss, mean, recon_loss, DBatch,
    LossReport,
};
use crate::autodiff::Tape;
use crate::config::Config;
use crate::error::{Error, Result};
use crate::mask::MaskMetric;
use crate::model::Model;
use crate::nn::{Adam, AdamConfig};
use crate::tensor::Tensor;

pub struct Batch {
    pub images: Vec<Tensor>,
    pub masks: Vec<MaskMetric>,
    pub captions: Vec<String>,
    pub tokens: Vec<Vec<usize>>,
    pub noise: Vec<Tensor>,
}

pub fn sample_noise(rng: &mut impl Rng, dim: usize) -> Tensor {
    Tensor::from_fn(&[dim], |_| rng.sample::<f64, _>(StandardNormal))
}

pub struct Trainer {
    pub cfg: Config,
    pub model: Model,
    pub adam_g: Adam,
    pub adam_d: Adam,
    pub rng: ChaCha8Rng,
    pub step: u64,
}

impl Trainer {
    pub fn new(cfg: Config) -> Result<Self> {
        cfg.validate()?;
        let model = Model::new(&cfg.model)?;
        let o = &cfg.optim;
        let adam_g = Adam::new(
            AdamConfig {
                lr: o.lr_g,
                beta1: o.beta1,
                beta2: o.beta2,
                eps: o.eps,
            },
            &model.gen_params,
        );
        let adam_d = Adam::new(
            AdamConfig {
                lr: o.lr_d,
                beta1: o.beta1,
                beta2: o.beta2,
                eps: o.eps,
            },
            &model.disc_params,
        );
        let rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
        Ok(Self {
            cfg,
            model,
            adam_g,
            adam_d,
            rng,
            step: 0,
        })
    }

    /// Draws scenes from the training split, masks and noise, all from the
    /// run's master generator.
    pub fn sample_batch(&mut self) -> Result<Batch> {
        let n = self.cfg.train.batch_size;
        let size = self.cfg.model.image_size;
        let mut batch = Batch {
            images: Vec::with_capacity(n),
            masks: Vec::with_capacity(n),
            captions: Vec::with_capacity(n),
            tokens: Vec::with_capacity(n),
            noise: Vec::with_capacity(n),
        };
        for _ in 0..n {
            let scene = render_scene(training_seed(self.rng.random()), size);
            let mask = masks::generate(&self.cfg.mask, size, self.rng.random())?;
            batch.tokens.push(self.model.vocab.tokenize(&scene.caption));
            batch.noise.push(sample_noise(&mut self.rng, self.cfg.model.noise_dim));
            batch.images.push(scene.image);
            batch.captions.push(scene.caption);
            batch.masks.push(mask);
        }
        Ok(batch)
    }

    pub fn train_step(&mut self) -> Result<LossReport> {
        let batch = self.sample_batch()?;
        self.step_on(&batch)
    }

    /// One discriminator update on detached generator output, then one
    /// generator update against the refreshed discriminator.
    pub fn step_on(&mut self, batch: &Batch) -> Result<LossReport> {
        let n = batch.images.len();
        let m = &mut self.model;
        let g_tape = Tape::new();
        let gp = m.gen_params.bind(&g_tape, true);
        let mut outs = Vec::with_capacity(n);
        for b in 0..n {
            outs.push(m.generator.forward(&gp, &batch.images[b], &batch.masks[b], &batch.noise[b], &batch.tokens[b])?);
        }
        let fakes: Vec<Tensor> = outs.iter().map(|o| (*o.composited.value()).clone()).collect();
        let sentences: Vec<Tensor> = outs.iter().map(|o| (*o.text.sentence.value()).clone()).collect();
        let mismatched: Vec<Tensor> = (0..n).map(|b| sentences[(b + 1) % n].clone()).collect();

        let mut report = LossReport::default();
        {
            let d_tape = Tape::new();
            let dp = m.disc_params.bind(&d_tape, true);
            let critic = m.disc.bind(&dp);
            let d = d_loss(
                &d_tape,
                &critic,
                &DBatch {
                    real: &batch.images,
                    fake: &fakes,
                    sentences: &sentences,
                    mismatched: Some(&mismatched),
                },
                &self.cfg.loss,
            )?;
            report.d_real = d.real.item();
            report.d_fake = d.fake.item();
            report.d_mismatch = d.mismatch.item();
            report.d_penalty = d.penalty.item();
            report.d_total = d.total.item();
            check_finite(&report, self.step)?;
            d_tape.backward(d.total)?;
            self.adam_d.update(&mut m.disc_params, &dp.grads())?;
        }

        let dp = m.disc_params.bind(&g_tape, false);
        let critic = m.disc.bind(&dp);
        let fe = m.features.bind(&g_tape);
        let generated: Vec<_> = outs.iter().map(|o| o.composited).collect();
        let conds: Vec<_> = outs.iter().map(|o| o.text.sentence.detach()).collect();
        let adv = g_adv_loss(&critic, &generated, &conds)?;
        let size = m.cfg.image_size;
        let mut recs = Vec::with_capacity(n);
        let mut attns = Vec::with_capacity(n);
        for (b, o) in outs.iter().enumerate() {
            let real = g_tape.constant(batch.images[b].clone());
            recs.push(recon_loss(&m.features, &fe, o.composited, real)?);
            let map = attention_map(&o.queries.value(), &o.text.words.value(), size, size)?;
            attns.push(attn_loss(&map, o.composited, real)?);
        }
        let rec = mean(&recs)?;
        let attn = mean(&attns)?;
        let damsm = damsm_loss(&g_tape);
        let total = g_total_loss(rec, adv, attn, damsm, &self.cfg.loss)?;
        report.g_rec = rec.item();
        report.g_adv = adv.item();
        report.g_attn = attn.item();
        report.g_damsm = damsm.item();
        report.g_total = total.item();
        check_finite(&report, self.step)?;
        g_tape.backward(total)?;
        self.adam_g.update(&mut m.gen_params, &gp.grads())?;
        self.step += 1;
        Ok(report)
    }

    /// Runs until `cfg.train.steps` total steps, reporting each step.
    pub fn run(&mut self, mut on_step: impl FnMut(&Trainer, &LossReport) -> Result<()>) -> Result<()> {
        while self.step < self.cfg.train.steps {
            let report = self.train_step()?;
            on_step(self, &report)?;
        }
        Ok(())
    }
}

fn check_finite(report: &LossReport, step: u64) -> Result<()> {
    match report.non_finite() {
        Some(name) => Err(Error::NonFinite(format!("{name} is not finite at step {step}"))),
        None => Ok(()),
    }
}
