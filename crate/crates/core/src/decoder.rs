//! Dual-path affine-transformation decoder.
//!
//! Every block carries a global path, modulated per channel from a
//! recurrent state driven by the sentence embedding, and a spatial path,
//! modulated per pixel from cross-attention over the word features.

use crate::autodiff::Var;
use crate::encoder::EncoderPyramid;
use crate::error::{Error, Result};
use crate::nn::{Bound, Conv, Init, Linear, LstmCell, Mlp, LEAK};
use crate::text::TextBundle;

#[derive(Debug, Clone, Copy)]
pub struct RecurrentState<'t> {
    pub hidden: Var<'t>,
    pub cell: Var<'t>,
    pub step: usize,
}

impl<'t> RecurrentState<'t> {
    pub fn zeros(tape: &'t crate::Tape, width: usize) -> Self {
        let z = tape.constant(crate::Tensor::zeros(&[width]));
        Self {
            hidden: z,
            cell: z,
            step: 0,
        }
    }
}

/// Adds a modulation to `x` residually: `x + (gain * x + shift)`.
fn residual_affine<'t>(x: Var<'t>, gain: Var<'t>, shift: Var<'t>) -> Result<Var<'t>> {
    x.add(x.channel_affine(gain, shift)?)
}

/// `[C, H, W] -> [H*W, C]`.
pub fn to_rows(x: Var<'_>) -> Result<Var<'_>> {
    let s = x.shape();
    x.reshape(&[s[0], s[1] * s[2]])?.transpose()
}

/// `[H*W, C] -> [C, H, W]`.
pub fn from_rows(rows: Var<'_>, height: usize, width: usize) -> Result<Var<'_>> {
    let c = rows.shape()[1];
    rows.transpose()?.reshape(&[c, height, width])
}

#[derive(Debug, Clone)]
pub struct Rat {
    pub lstm: LstmCell,
    pub gamma: Mlp,
    pub beta: Mlp,
}

impl Rat {
    pub fn new(init: &mut Init<'_>, name: &str, word_dim: usize, channels: usize) -> Self {
        Self {
            lstm: LstmCell::new(init, &format!("{name}.lstm"), word_dim, word_dim),
            gamma: Mlp::new(init, &format!("{name}.gamma"), word_dim, word_dim, channels),
            beta: Mlp::new(init, &format!("{name}.beta"), word_dim, word_dim, channels),
        }
    }

    /// Advances the shared recurrent state once and modulates `x` with the
    /// per-channel scale and shift read from the new hidden state.
    pub fn step<'t>(
        &self,
        p: &Bound<'t>,
        x: Var<'t>,
        sentence: Var<'t>,
        state: RecurrentState<'t>,
        block: usize,
    ) -> Result<(Var<'t>, RecurrentState<'t>)> {
        if state.step != block {
            return Err(Error::Contract(format!(
                "recurrent state at step {} used by block {block}",
                state.step
            )));
        }
        let (hidden, cell) = self.lstm.forward(p, sentence, state.hidden, state.cell)?;
        let gain = self.gamma.forward(p, hidden)?;
        let shift = self.beta.forward(p, hidden)?;
        let out = residual_affine(x, gain, shift)?;
        Ok((
            out,
            RecurrentState {
                hidden,
                cell,
                step: block + 1,
            },
        ))
    }
}

/// Attention of every pixel over the words, as rows: queries `[H*W, d_w]`
/// and attended word features `[H*W, d_w]`.
pub fn attend_rows<'t>(
    x_rows: Var<'t>,
    words: Var<'t>,
    query: Var<'t>,
) -> Result<(Var<'t>, Var<'t>)> {
    let q = x_rows.linear(query, None)?;
    let logits = q.matmul(words.transpose()?)?;
    let attn = logits.softmax(1)?;
    Ok((q, attn.matmul(words)?))
}

/// Per-pixel word attention, returned as `[d_w, H, W]`.
pub fn cross_attention<'t>(x: Var<'t>, words: Var<'t>, query: Var<'t>) -> Result<Var<'t>> {
    let s = x.shape();
    let (_, f) = attend_rows(to_rows(x)?, words, query)?;
    from_rows(f, s[1], s[2])
}

#[derive(Debug, Clone)]
pub struct CrossAffine {
    /// `[d_w, C]` query projection, no bias.
    pub query: Linear,
    pub gamma: Mlp,
    pub beta: Mlp,
}

/// Output of [`CrossAffine::forward`] plus the queries it formed.
pub struct CrossAffineOut<'t> {
    pub out: Var<'t>,
    pub queries: Var<'t>,
}

impl CrossAffine {
    pub fn new(init: &mut Init<'_>, name: &str, word_dim: usize, channels: usize) -> Self {
        Self {
            query: Linear::new(init, &format!("{name}.query"), channels, word_dim, false),
            gamma: Mlp::new(init, &format!("{name}.gamma"), 2 * word_dim, word_dim, channels),
            beta: Mlp::new(init, &format!("{name}.beta"), 2 * word_dim, word_dim, channels),
        }
    }

    pub fn forward<'t>(
        &self,
        p: &Bound<'t>,
        x: Var<'t>,
        hidden: Var<'t>,
        words: Var<'t>,
    ) -> Result<CrossAffineOut<'t>> {
        let tape = x.tape();
        let s = x.shape();
        let (h, w) = (s[1], s[2]);
        let rows = to_rows(x)?;
        let (queries, attended) = attend_rows(rows, words, p[self.query.weight])?;
        let replicated = to_rows(hidden.spatial_replicate(h, w)?)?;
        let cond = tape.concat(&[attended, replicated], 1)?;
        let gain = self.gamma.forward(p, cond)?;
        let shift = self.beta.forward(p, cond)?;
        let out_rows = rows.add(gain.mul(rows)?)?.add(shift)?;
        Ok(CrossAffineOut {
            out: from_rows(out_rows, h, w)?,
            queries,
        })
    }
}

#[derive(Debug, Clone)]
pub struct Mcat {
    pub affine: CrossAffine,
    pub conv: Conv,
    /// Channel match for the previous spatial output when widths differ.
    pub prev_proj: Option<Conv>,
}

pub struct McatOut<'t> {
    pub out: Var<'t>,
    pub queries: Var<'t>,
}

impl Mcat {
    pub fn forward<'t>(
        &self,
        p: &Bound<'t>,
        x: Var<'t>,
        hidden: Var<'t>,
        words: Var<'t>,
        prev_spatial: Option<Var<'t>>,
    ) -> Result<McatOut<'t>> {
        let a = self.affine.forward(p, x, hidden, words)?;
        let y = self.conv.forward(p, a.out.leaky_relu(LEAK))?;
        let out = match prev_spatial {
            None => y,
            Some(prev) => {
                let prev = match &self.prev_proj {
                    Some(c) => c.forward(p, prev)?,
                    None => prev,
                };
                let up = prev.upsample_nearest2x()?;
                if up.shape() != y.shape() {
                    return Err(Error::Shape {
                        op: "mcat",
                        detail: format!("upsampled previous {:?} vs current {:?}", up.shape(), y.shape()),
                    });
                }
                y.add(up)?
            }
        };
        Ok(McatOut {
            out,
            queries: a.queries,
        })
    }
}

#[derive(Debug, Clone)]
pub struct DaftBlock {
    pub index: usize,
    /// Upsample-conv on the previous global output; absent in block 0.
    pub global_conv: Option<Conv>,
    /// Channel match for the encoder skip when widths differ.
    pub skip_proj: Option<Conv>,
    pub rat: Rat,
    pub mcat: Mcat,
}

/// Element-wise residual fusion of an encoder skip and a decoder feature.
pub fn fuse_skip<'t>(skip: Var<'t>, decoded: Var<'t>) -> Result<Var<'t>> {
    if skip.shape() != decoded.shape() {
        return Err(Error::Shape {
            op: "fuse_skip",
            detail: format!("skip {:?} vs decoder {:?}", skip.shape(), decoded.shape()),
        });
    }
    skip.add(decoded)
}

pub struct DecoderOutput<'t> {
    /// Final spatial-path features `[C, S, S]`.
    pub spatial: Var<'t>,
    /// Queries of the last block's cross-attention, `[S*S, d_w]`.
    pub queries: Var<'t>,
    pub hidden_states: Vec<Var<'t>>,
}

#[derive(Debug, Clone)]
pub struct Decoder {
    pub noise: Linear,
    pub bottleneck_proj: Option<Conv>,
    pub blocks: Vec<DaftBlock>,
    pub channels: Vec<usize>,
    pub noise_dim: usize,
}

impl Decoder {
    /// `enc_channels[j]` is the width of encoder level `j + 1`;
    /// `channels[i]` the width of decoder block `i` at side `4 * 2^i`.
    pub fn new(
        init: &mut Init<'_>,
        enc_channels: &[usize],
        channels: &[usize],
        word_dim: usize,
        noise_dim: usize,
    ) -> Result<Self> {
        let depth = enc_channels.len();
        if channels.len() != depth {
            return Err(Error::Config(format!(
                "decoder has {} widths for an encoder of depth {depth}",
                channels.len()
            )));
        }
        let c0 = channels[0];
        let noise = Linear::new(init, "dec.noise", noise_dim, c0 * 16, true);
        let bottleneck_proj = (enc_channels[depth - 1] != c0)
            .then(|| Conv::new(init, "dec.bottleneck_proj", enc_channels[depth - 1], c0, 1, 1, 0, true));
        let mut blocks = Vec::with_capacity(depth);
        for (i, &c) in channels.iter().enumerate() {
            let name = format!("dec.{i}");
            let (global_conv, skip_proj, prev_proj) = if i == 0 {
                (None, None, None)
            } else {
                let prev = channels[i - 1];
                let skip_c = enc_channels[depth - 1 - i];
                (
                    Some(Conv::new(init, &format!("{name}.global_conv"), prev, c, 3, 1, 1, true)),
                    (skip_c != c).then(|| Conv::new(init, &format!("{name}.skip_proj"), skip_c, c, 1, 1, 0, true)),
                    (prev != c).then(|| Conv::new(init, &format!("{name}.prev_proj"), prev, c, 1, 1, 0, true)),
                )
            };
            let rat = Rat::new(init, &format!("{name}.rat"), word_dim, c);
            let mcat = Mcat {
                affine: CrossAffine::new(init, &format!("{name}.mcat.affine"), word_dim, c),
                conv: Conv::new(init, &format!("{name}.mcat.conv"), c, c, 3, 1, 1, true),
                prev_proj,
            };
            blocks.push(DaftBlock {
                index: i,
                global_conv,
                skip_proj,
                rat,
                mcat,
            });
        }
        Ok(Self {
            noise,
            bottleneck_proj,
            blocks,
            channels: channels.to_vec(),
            noise_dim,
        })
    }

    /// Noise mapped to the bottleneck shape plus the bottleneck feature.
    pub fn init_input<'t>(&self, p: &Bound<'t>, z: Var<'t>, bottleneck: Var<'t>) -> Result<Var<'t>> {
        let c0 = self.channels[0];
        let base = match &self.bottleneck_proj {
            Some(c) => c.forward(p, bottleneck)?,
            None => bottleneck,
        };
        let mapped = self.noise.forward(p, z)?.reshape(&[c0, 4, 4])?;
        if base.shape() != mapped.shape() {
            return Err(Error::Shape {
                op: "init_input",
                detail: format!("bottleneck {:?} vs noise map {:?}", base.shape(), mapped.shape()),
            });
        }
        mapped.add(base)
    }

    pub fn decode<'t>(
        &self,
        p: &Bound<'t>,
        pyramid: &EncoderPyramid<'t>,
        z: Var<'t>,
        text: TextBundle<'t>,
    ) -> Result<DecoderOutput<'t>> {
        let depth = self.blocks.len();
        if pyramid.depth() != depth {
            return Err(Error::Config(format!(
                "decoder depth {depth} but encoder pyramid depth {}",
                pyramid.depth()
            )));
        }
        let tape = z.tape();
        let word_dim = text.sentence.numel();
        let mut state = RecurrentState::zeros(tape, word_dim);
        let mut global: Option<Var<'t>> = None;
        let mut spatial: Option<Var<'t>> = None;
        let mut queries = None;
        let mut hidden_states = Vec::with_capacity(depth);
        for block in &self.blocks {
            let g_in = match (&block.global_conv, global) {
                (None, _) => self.init_input(p, z, pyramid.bottleneck())?,
                (Some(conv), Some(prev)) => {
                    let g = conv.forward(p, prev.upsample_nearest2x()?.leaky_relu(LEAK))?;
                    let skip = pyramid.features[depth - block.index];
                    let skip = match &block.skip_proj {
                        Some(c) => c.forward(p, skip)?,
                        None => skip,
                    };
                    fuse_skip(skip, g)?
                }
                (Some(_), None) => unreachable!("block 0 has no global conv"),
            };
            let (g_out, next) = block.rat.step(p, g_in, text.sentence, state, block.index)?;
            state = next;
            hidden_states.push(state.hidden);
            let m = block.mcat.forward(p, g_out, state.hidden, text.words, spatial)?;
            global = Some(g_out);
            spatial = Some(m.out);
            queries = Some(m.queries);
        }
        Ok(DecoderOutput {
            spatial: spatial.expect("at least one block"),
            queries: queries.expect("at least one block"),
            hidden_states,
        })
    }
}
