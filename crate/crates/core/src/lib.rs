//! Text-guided image inpainting: a separated-mask-convolution encoder, a
//! dual-path affine decoder, a matching-aware discriminator and the
//! training harness around them, all on a small `f64` autodiff engine.

pub mod adversary;
pub mod autodiff;
pub mod config;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod io;
pub mod mask;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod text;

pub use autodiff::{Tape, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;
