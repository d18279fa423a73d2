use std::io;

/// Errors surfaced by every layer of the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid parameter for {op}: {detail}")]
    Param { op: &'static str, detail: String },

    #[error("double-backward is not supported through op `{0}`")]
    UnsupportedDoubleBackward(&'static str),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("mask generation failed: {0}")]
    MaskGeneration(String),

    #[error("non-finite value in loss component `{0}`")]
    NonFinite(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("image format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err<T>(op: &'static str, detail: impl Into<String>) -> Result<T> {
    Err(Error::Shape {
        op,
        detail: detail.into(),
    })
}

pub(crate) fn param_err<T>(op: &'static str, detail: impl Into<String>) -> Result<T> {
    Err(Error::Param {
        op,
        detail: detail.into(),
    })
}
