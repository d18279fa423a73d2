//! Generator assembly and the full parameter set of a run.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::adversary::{Discriminator, FeatureExtractor};
use crate::autodiff::{Tape, Var};
use crate::config::ModelConfig;
use crate::decoder::Decoder;
use crate::encoder::{Encoder, EncoderPyramid};
use crate::error::{Error, Result};
use crate::mask::MaskMetric;
use crate::nn::{Bound, Conv, Init, ParamStore, LEAK};
use crate::tensor::Tensor;
use crate::text::{TextBundle, TextEncoder, Vocabulary};

#[derive(Debug, Clone)]
pub struct Generator {
    pub text: TextEncoder,
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub to_rgb: Conv,
    pub image_size: usize,
}

pub struct GeneratorOutput<'t> {
    /// `tanh` output before compositing, in [-1, 1].
    pub raw: Var<'t>,
    /// Input at valid pixels, `raw` inside the hole.
    pub composited: Var<'t>,
    pub masked: Var<'t>,
    pub text: TextBundle<'t>,
    /// Queries of the final cross-attention stage, `[S*S, d_w]`.
    pub queries: Var<'t>,
    pub hidden_states: Vec<Var<'t>>,
    pub pyramid: EncoderPyramid<'t>,
}

impl Generator {
    pub fn new(init: &mut Init<'_>, cfg: &ModelConfig, vocab: &Vocabulary) -> Result<Self> {
        let text = TextEncoder::new(init, vocab, cfg.word_dim);
        let encoder = Encoder::new(init, &cfg.enc_channels, 3)?;
        if encoder.image_size != cfg.image_size {
            return Err(Error::Config(format!(
                "image_size {} does not match depth {} (expected {})",
                cfg.image_size, cfg.depth, encoder.image_size
            )));
        }
        let decoder = Decoder::new(init, &cfg.enc_channels, &cfg.dec_channels, cfg.word_dim, cfg.noise_dim)?;
        let last = *cfg.dec_channels.last().expect("validated depth");
        let to_rgb = Conv::zeroed(init, "to_rgb", last, 3, 3, 1);
        Ok(Self {
            text,
            encoder,
            decoder,
            to_rgb,
            image_size: cfg.image_size,
        })
    }

    /// `image` is the full `[3, S, S]` picture; pixels under the mask are
    /// zeroed before anything reads them.
    pub fn forward<'t>(
        &self,
        p: &Bound<'t>,
        image: &Tensor,
        mask: &MaskMetric,
        z: &Tensor,
        tokens: &[usize],
    ) -> Result<GeneratorOutput<'t>> {
        let s = self.image_size;
        if image.shape() != [3, s, s] || mask.height() != s || mask.width() != s {
            return Err(Error::Shape {
                op: "generate",
                detail: format!(
                    "expected a [3, {s}, {s}] image and {s}x{s} mask, got {:?} and {}x{}",
                    image.shape(),
                    mask.height(),
                    mask.width()
                ),
            });
        }
        let tape: &'t Tape = p[self.text.table].tape();
        let keep = mask.keep_tensor(3);
        let masked_vals = Tensor::from_fn(&[3, s, s], |i| image.data()[i] * keep.data()[i]);
        let masked = tape.constant(masked_vals);
        let z = tape.constant(z.clone());
        self.forward_vars(p, masked, mask, z, tokens)
    }

    /// As [`Generator::forward`] with the masked image and noise already on
    /// the tape.
    pub fn forward_vars<'t>(
        &self,
        p: &Bound<'t>,
        masked: Var<'t>,
        mask: &MaskMetric,
        z: Var<'t>,
        tokens: &[usize],
    ) -> Result<GeneratorOutput<'t>> {
        let tape = masked.tape();
        let text = self.text.encode(p, tokens)?;
        let pyramid = self.encoder.encode(p, masked, mask)?;
        let dec = self.decoder.decode(p, &pyramid, z, text)?;
        let raw = self.to_rgb.forward(p, dec.spatial.leaky_relu(LEAK))?.tanh();
        let hole = tape.constant(mask.hole_tensor(3));
        let keep = tape.constant(mask.keep_tensor(3));
        let composited = masked.mul(keep)?.add(raw.mul(hole)?)?;
        Ok(GeneratorOutput {
            raw,
            composited,
            masked,
            text,
            queries: dec.queries,
            hidden_states: dec.hidden_states,
            pyramid,
        })
    }
}

/// Everything a run trains or reads, with deterministic construction.
#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub vocab: Vocabulary,
    pub generator: Generator,
    pub gen_params: ParamStore,
    pub disc: Discriminator,
    pub disc_params: ParamStore,
    pub features: FeatureExtractor,
}

impl Model {
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        let vocab = Vocabulary::default();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.init_seed);
        let mut gen_params = ParamStore::new();
        let generator = Generator::new(
            &mut Init {
                store: &mut gen_params,
                rng: &mut rng,
            },
            cfg,
            &vocab,
        )?;
        let mut disc_params = ParamStore::new();
        let disc = Discriminator::new(
            &mut Init {
                store: &mut disc_params,
                rng: &mut rng,
            },
            &cfg.disc_channels,
            cfg.word_dim,
            cfg.image_size,
        )?;
        Ok(Self {
            cfg: cfg.clone(),
            vocab,
            generator,
            gen_params,
            disc,
            disc_params,
            features: FeatureExtractor::seeded(cfg.feature_seed),
        })
    }
}
