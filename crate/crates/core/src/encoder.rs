//! Separated-mask-convolution encoder.
//!
//! Each block convolves the valid and invalid regions of its input with
//! separate kernels, updates the mask by min-pooling with the same window,
//! recomposes the two paths by the updated mask and normalizes each region
//! with its own statistics.

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::mask::MaskMetric;
use crate::nn::{Bound, Conv, Init, ParamId};

pub const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct SmcBlock {
    pub conv_valid: Conv,
    pub conv_invalid: Conv,
    pub gain: ParamId,
    pub shift: ParamId,
    pub kernel: usize,
}

impl SmcBlock {
    pub fn new(init: &mut Init<'_>, name: &str, c_in: usize, c_out: usize, downsample: bool) -> Self {
        let (k, s, p) = if downsample { (4, 2, 1) } else { (3, 1, 1) };
        Self {
            conv_valid: Conv::new(init, &format!("{name}.valid"), c_in, c_out, k, s, p, false),
            conv_invalid: Conv::new(init, &format!("{name}.invalid"), c_in, c_out, k, s, p, false),
            gain: init.ones(&format!("{name}.norm.gain"), &[c_out]),
            shift: init.zeros(&format!("{name}.norm.shift"), &[c_out]),
            kernel: k,
        }
    }

    pub fn stride(&self) -> usize {
        self.conv_valid.stride
    }

    pub fn padding(&self) -> usize {
        self.conv_valid.padding
    }

    /// Region-split features before the learnable affine: valid cells of
    /// the updated mask come from the valid path, invalid cells from the
    /// invalid path, each standardized within its region.
    pub fn split_features<'t>(
        &self,
        p: &Bound<'t>,
        x: Var<'t>,
        mask: &MaskMetric,
    ) -> Result<(Var<'t>, MaskMetric)> {
        let tape = x.tape();
        let shape = x.shape();
        if shape.len() != 3 || shape[1] != mask.height() || shape[2] != mask.width() {
            return Err(Error::Contract(format!(
                "feature {shape:?} does not match {}x{} mask",
                mask.height(),
                mask.width()
            )));
        }
        let c_in = shape[0];
        let valid_in = x.mul(tape.constant(mask.keep_tensor(c_in)))?;
        let invalid_in = x.mul(tape.constant(mask.hole_tensor(c_in)))?;
        let valid = self.conv_valid.forward(p, valid_in)?;
        let invalid = self.conv_invalid.forward(p, invalid_in)?;
        let next = mask.update(self.kernel, self.stride(), self.padding())?;
        let out_shape = valid.shape();
        if out_shape[1] != next.height() || out_shape[2] != next.width() {
            return Err(Error::Contract(format!(
                "mask update produced {}x{} but convolution produced {}x{}",
                next.height(),
                next.width(),
                out_shape[1],
                out_shape[2]
            )));
        }
        let c_out = out_shape[0];
        let composed = valid
            .mul(tape.constant(next.keep_tensor(c_out)))?
            .add(invalid.mul(tape.constant(next.hole_tensor(c_out)))?)?;
        // Normalizing the recomposed map per region equals normalizing each
        // path against the updated mask and then recomposing.
        let normed = composed.region_normalize(&next.is_invalid(), NORM_EPS)?;
        Ok((normed, next))
    }

    pub fn forward<'t>(
        &self,
        p: &Bound<'t>,
        x: Var<'t>,
        mask: &MaskMetric,
    ) -> Result<(Var<'t>, MaskMetric)> {
        let (normed, next) = self.split_features(p, x, mask)?;
        Ok((normed.channel_affine(p[self.gain], p[self.shift])?, next))
    }
}

/// Features and masks for levels `0..=L`; level 0 is the masked input.
#[derive(Debug, Clone)]
pub struct EncoderPyramid<'t> {
    pub features: Vec<Var<'t>>,
    pub masks: Vec<MaskMetric>,
}

impl<'t> EncoderPyramid<'t> {
    pub fn depth(&self) -> usize {
        self.features.len() - 1
    }

    pub fn bottleneck(&self) -> Var<'t> {
        *self.features.last().expect("pyramid has levels")
    }
}

#[derive(Debug, Clone)]
pub struct Encoder {
    pub blocks: Vec<SmcBlock>,
    pub image_size: usize,
}

/// `4 * 2^(depth - 1)`, the image side whose pyramid bottoms out at 4x4.
pub fn image_size_for_depth(depth: usize) -> Option<usize> {
    if depth == 0 || depth > 16 {
        None
    } else {
        Some(4usize << (depth - 1))
    }
}

impl Encoder {
    /// One block per entry of `channels`; the first keeps resolution and
    /// every later one halves it.
    pub fn new(init: &mut Init<'_>, channels: &[usize], in_channels: usize) -> Result<Self> {
        let image_size = image_size_for_depth(channels.len())
            .ok_or_else(|| Error::Config(format!("encoder depth {} unsupported", channels.len())))?;
        let mut blocks = Vec::with_capacity(channels.len());
        let mut c_in = in_channels;
        for (i, &c) in channels.iter().enumerate() {
            blocks.push(SmcBlock::new(init, &format!("enc.{i}"), c_in, c, i > 0));
            c_in = c;
        }
        Ok(Self { blocks, image_size })
    }

    pub fn depth(&self) -> usize {
        self.blocks.len()
    }

    /// `masked` must already hold zeros at invalid pixels.
    pub fn encode<'t>(
        &self,
        p: &Bound<'t>,
        masked: Var<'t>,
        mask: &MaskMetric,
    ) -> Result<EncoderPyramid<'t>> {
        let s = self.image_size;
        let shape = masked.shape();
        if shape.len() != 3 || shape[1] != s || shape[2] != s {
            return Err(Error::Config(format!(
                "encoder of depth {} expects {s}x{s} input (side = 4 * 2^(depth - 1)), got {shape:?}",
                self.depth()
            )));
        }
        let mut features = vec![masked];
        let mut masks = vec![mask.clone()];
        for block in &self.blocks {
            let (f, m) = block.forward(p, *features.last().unwrap(), masks.last().unwrap())?;
            features.push(f);
            masks.push(m);
        }
        Ok(EncoderPyramid { features, masks })
    }
}
