//! Closed-grammar tokenizer and a trainable mean-pooled text encoder.

use crate::autodiff::Var;
use crate::error::Result;
use crate::nn::{Bound, Init, ParamId};

pub const MAX_TOKENS: usize = 8;
pub const UNKNOWN: usize = 0;

pub const COLORS: [&str; 6] = ["red", "green", "blue", "yellow", "white", "black"];
pub const SHAPES: [&str; 4] = ["circle", "square", "triangle", "bar"];
pub const SIZES: [&str; 2] = ["small", "large"];
pub const POSITIONS: [&str; 5] = ["left", "right", "top", "bottom", "center"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        let tokens = std::iter::once("<unk>")
            .chain(COLORS)
            .chain(SHAPES)
            .chain(SIZES)
            .chain(POSITIONS)
            .map(String::from)
            .collect();
        Self { tokens }
    }
}

impl Vocabulary {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn index(&self, word: &str) -> usize {
        self.tokens[1..]
            .iter()
            .position(|t| t == word)
            .map_or(UNKNOWN, |i| i + 1)
    }

    /// Lowercased whitespace tokens, truncated to [`MAX_TOKENS`]; never empty.
    pub fn tokenize(&self, caption: &str) -> Vec<usize> {
        let mut ids: Vec<usize> = caption
            .split_whitespace()
            .take(MAX_TOKENS)
            .map(|w| self.index(&w.to_lowercase()))
            .collect();
        if ids.is_empty() {
            ids.push(UNKNOWN);
        }
        ids
    }
}

/// Word features `[L_w, d_w]` and their mean `[d_w]`.
#[derive(Debug, Clone, Copy)]
pub struct TextBundle<'t> {
    pub words: Var<'t>,
    pub sentence: Var<'t>,
}

#[derive(Debug, Clone)]
pub struct TextEncoder {
    pub table: ParamId,
    pub dim: usize,
}

impl TextEncoder {
    pub fn new(init: &mut Init<'_>, vocab: &Vocabulary, dim: usize) -> Self {
        Self {
            table: init.normal("text.table", &[vocab.len(), dim], 0.02),
            dim,
        }
    }

    pub fn encode<'t>(&self, p: &Bound<'t>, tokens: &[usize]) -> Result<TextBundle<'t>> {
        let words = p[self.table].embedding(tokens)?;
        let sentence = words.mean_axis(0)?;
        Ok(TextBundle { words, sentence })
    }
}
