//! Held-out scoring and the mask-bias comparison.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::masks;
use super::metrics::{capped, psnr, ssim};
use super::scene::{held_out_seed, render_scene, ShapeScene};
use super::train::sample_noise;
use crate::autodiff::Tape;
use crate::config::{MaskConfig, MaskKind};
use crate::error::Result;
use crate::mask::MaskMetric;
use crate::model::Model;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalReport {
    pub scenes: usize,
    /// Mean capped PSNR of the composited output.
    pub psnr: f64,
    pub ssim: f64,
    /// Same scores for the masked input itself.
    pub baseline_psnr: f64,
    pub baseline_ssim: f64,
}

impl EvalReport {
    pub const CSV_HEADER: &'static str = "row,scenes,psnr,ssim";

    pub fn csv(&self) -> String {
        format!(
            "{}\nmodel,{},{:?},{:?}\nbaseline,{},{:?},{:?}\n",
            Self::CSV_HEADER,
            self.scenes,
            self.psnr,
            self.ssim,
            self.scenes,
            self.baseline_psnr,
            self.baseline_ssim
        )
    }
}

/// A held-out case: scene, mask and noise all fixed by `(seed, k)`.
pub struct EvalCase {
    pub scene: ShapeScene,
    pub mask: MaskMetric,
    pub noise: Tensor,
}

pub fn eval_case(model: &Model, mask_spec: &MaskConfig, seed: u64, k: u64) -> Result<EvalCase> {
    let size = model.cfg.image_size;
    let scene = render_scene(held_out_seed(k), size);
    let case_seed = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(k);
    let mask = masks::generate(mask_spec, size, case_seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(case_seed ^ 0x5EED);
    let noise = sample_noise(&mut rng, model.cfg.noise_dim);
    Ok(EvalCase { scene, mask, noise })
}

/// Composited output for one input with frozen parameters.
pub fn inpaint(model: &Model, image: &Tensor, mask: &MaskMetric, noise: &Tensor, caption: &str) -> Result<Tensor> {
    let tape = Tape::new();
    let p = model.gen_params.bind(&tape, false);
    let tokens = model.vocab.tokenize(caption);
    let out = model.generator.forward(&p, image, mask, noise, &tokens)?;
    let v = out.composited.value();
    Ok((*v).clone())
}

pub fn masked_input(image: &Tensor, mask: &MaskMetric) -> Tensor {
    let keep = mask.keep_tensor(image.shape()[0]);
    Tensor::from_fn(image.shape(), |i| image.data()[i] * keep.data()[i])
}

pub fn evaluate(model: &Model, mask_spec: &MaskConfig, scenes: usize, seed: u64) -> Result<EvalReport> {
    let mut acc = [0.0f64; 4];
    for k in 0..scenes as u64 {
        let case = eval_case(model, mask_spec, seed, k)?;
        let truth = &case.scene.image;
        let out = inpaint(model, truth, &case.mask, &case.noise, &case.scene.caption)?;
        let base = masked_input(truth, &case.mask);
        acc[0] += capped(psnr(&out, truth)?);
        acc[1] += ssim(&out, truth)?;
        acc[2] += capped(psnr(&base, truth)?);
        acc[3] += ssim(&base, truth)?;
    }
    let n = scenes as f64;
    Ok(EvalReport {
        scenes,
        psnr: acc[0] / n,
        ssim: acc[1] / n,
        baseline_psnr: acc[2] / n,
        baseline_ssim: acc[3] / n,
    })
}

/// PSNR of two models under center and irregular masks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskBiasReport {
    pub center_on_center: f64,
    pub center_on_irregular: f64,
    pub diverse_on_center: f64,
    pub diverse_on_irregular: f64,
}

impl MaskBiasReport {
    pub fn center_gap(&self) -> f64 {
        self.center_on_center - self.center_on_irregular
    }

    pub fn diverse_gap(&self) -> f64 {
        self.diverse_on_center - self.diverse_on_irregular
    }
}

pub fn mask_bias_experiment(
    center_model: &Model,
    diverse_model: &Model,
    masks: &MaskConfig,
    scenes: usize,
    seed: u64,
) -> Result<MaskBiasReport> {
    let center = MaskConfig {
        kind: MaskKind::Center,
        ..masks.clone()
    };
    let irregular = MaskConfig {
        kind: MaskKind::Irregular,
        ..masks.clone()
    };
    let score = |m: &Model, spec: &MaskConfig| evaluate(m, spec, scenes, seed).map(|r| r.psnr);
    Ok(MaskBiasReport {
        center_on_center: score(center_model, &center)?,
        center_on_irregular: score(center_model, &irregular)?,
        diverse_on_center: score(diverse_model, &center)?,
        diverse_on_irregular: score(diverse_model, &irregular)?,
    })
}
