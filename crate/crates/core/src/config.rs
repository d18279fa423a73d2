//! Run configuration and its line-oriented text form.
//!
//! ```text
//! [model]
//! image_size = 32
//! depth = 4
//! enc_channels = 32, 64, 128, 256
//! ```
//!
//! Blank lines and lines starting with `#` are ignored. Unknown sections or
//! keys are errors.

use std::fmt::Write as _;
use std::path::PathBuf;

use crate::encoder::image_size_for_depth;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskKind {
    Irregular,
    Center,
}

impl MaskKind {
    pub fn name(self) -> &'static str {
        match self {
            MaskKind::Irregular => "irregular",
            MaskKind::Center => "center",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "irregular" => Ok(MaskKind::Irregular),
            "center" => Ok(MaskKind::Center),
            other => Err(Error::Config(format!(
                "mask.kind: expected `irregular` or `center`, got `{other}`"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub image_size: usize,
    pub depth: usize,
    pub word_dim: usize,
    pub noise_dim: usize,
    pub enc_channels: Vec<usize>,
    pub dec_channels: Vec<usize>,
    pub disc_channels: Vec<usize>,
    pub init_seed: u64,
    pub feature_seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossConfig {
    pub lambda_rec: f64,
    pub lambda_damsm: f64,
    pub gp_k: f64,
    pub gp_p: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimConfig {
    pub lr_g: f64,
    pub lr_d: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub steps: u64,
    pub seed: u64,
    pub log_every: u64,
    pub checkpoint_every: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskConfig {
    pub kind: MaskKind,
    pub ratio_lo: f64,
    pub ratio_hi: f64,
    pub center_ratio: f64,
    pub brush_width_min: usize,
    pub brush_width_max: usize,
    pub walk_length: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub scenes: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub optim: OptimConfig,
    pub train: TrainConfig,
    pub mask: MaskConfig,
    pub eval: EvalConfig,
    pub output_dir: PathBuf,
}

/// Geometric width schedule starting at 32 and capped at 256.
pub fn default_widths(depth: usize) -> Vec<usize> {
    (0..depth).map(|i| (32usize << i.min(3)).min(256)).collect()
}

impl Default for Config {
    fn default() -> Self {
        let depth = 4;
        let enc = default_widths(depth);
        let dec: Vec<usize> = enc.iter().rev().copied().collect();
        Self {
            model: ModelConfig {
                image_size: 32,
                depth,
                word_dim: 32,
                noise_dim: 32,
                enc_channels: enc.clone(),
                dec_channels: dec,
                disc_channels: enc,
                init_seed: 1,
                feature_seed: 7,
            },
            loss: LossConfig {
                lambda_rec: 0.2,
                lambda_damsm: 0.01,
                gp_k: 2.0,
                gp_p: 6.0,
            },
            optim: OptimConfig {
                lr_g: 1e-4,
                lr_d: 4e-4,
                beta1: 0.0,
                beta2: 0.9,
                eps: 1e-8,
            },
            train: TrainConfig {
                batch_size: 8,
                steps: 2000,
                seed: 0,
                log_every: 1,
                checkpoint_every: 500,
            },
            mask: MaskConfig {
                kind: MaskKind::Irregular,
                ratio_lo: 0.1,
                ratio_hi: 0.7,
                center_ratio: 0.25,
                brush_width_min: 2,
                brush_width_max: 5,
                walk_length: 12,
            },
            eval: EvalConfig { scenes: 50, seed: 12345 },
            output_dir: PathBuf::from("daft-out"),
        }
    }
}

fn list(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(", ")
}

impl Config {
    /// Canonical text form; parsing it back yields an equal config.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let mut s = String::new();
        let _ = writeln!(s, "[model]");
        let _ = writeln!(s, "image_size = {}", m.image_size);
        let _ = writeln!(s, "depth = {}", m.depth);
        let _ = writeln!(s, "word_dim = {}", m.word_dim);
        let _ = writeln!(s, "noise_dim = {}", m.noise_dim);
        let _ = writeln!(s, "enc_channels = {}", list(&m.enc_channels));
        let _ = writeln!(s, "dec_channels = {}", list(&m.dec_channels));
        let _ = writeln!(s, "disc_channels = {}", list(&m.disc_channels));
        let _ = writeln!(s, "init_seed = {}", m.init_seed);
        let _ = writeln!(s, "feature_seed = {}", m.feature_seed);
        let l = &self.loss;
        let _ = writeln!(s, "\n[loss]");
        let _ = writeln!(s, "lambda_rec = {:?}", l.lambda_rec);
        let _ = writeln!(s, "lambda_damsm = {:?}", l.lambda_damsm);
        let _ = writeln!(s, "gp_k = {:?}", l.gp_k);
        let _ = writeln!(s, "gp_p = {:?}", l.gp_p);
        let o = &self.optim;
        let _ = writeln!(s, "\n[optim]");
        let _ = writeln!(s, "lr_g = {:?}", o.lr_g);
        let _ = writeln!(s, "lr_d = {:?}", o.lr_d);
        let _ = writeln!(s, "beta1 = {:?}", o.beta1);
        let _ = writeln!(s, "beta2 = {:?}", o.beta2);
        let _ = writeln!(s, "eps = {:?}", o.eps);
        let t = &self.train;
        let _ = writeln!(s, "\n[train]");
        let _ = writeln!(s, "batch_size = {}", t.batch_size);
        let _ = writeln!(s, "steps = {}", t.steps);
        let _ = writeln!(s, "seed = {}", t.seed);
        let _ = writeln!(s, "log_every = {}", t.log_every);
        let _ = writeln!(s, "checkpoint_every = {}", t.checkpoint_every);
        let k = &self.mask;
        let _ = writeln!(s, "\n[mask]");
        let _ = writeln!(s, "kind = {}", k.kind.name());
        let _ = writeln!(s, "ratio_lo = {:?}", k.ratio_lo);
        let _ = writeln!(s, "ratio_hi = {:?}", k.ratio_hi);
        let _ = writeln!(s, "center_ratio = {:?}", k.center_ratio);
        let _ = writeln!(s, "brush_width_min = {}", k.brush_width_min);
        let _ = writeln!(s, "brush_width_max = {}", k.brush_width_max);
        let _ = writeln!(s, "walk_length = {}", k.walk_length);
        let _ = writeln!(s, "\n[eval]");
        let _ = writeln!(s, "scenes = {}", self.eval.scenes);
        let _ = writeln!(s, "seed = {}", self.eval.seed);
        let _ = writeln!(s, "\n[output]");
        let _ = writeln!(s, "dir = {}", self.output_dir.display());
        s
    }

    /// Parses and validates. Keys absent from the text keep their defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Config::default();
        let mut section = String::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = name.trim().to_string();
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!("line {}: expected `key = value`", n + 1)));
            };
            cfg.set(&section, key.trim(), value.trim())
                .map_err(|e| match e {
                    Error::Config(msg) => Error::Config(format!("line {}: {msg}", n + 1)),
                    other => other,
                })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, section: &str, key: &str, value: &str) -> Result<()> {
        let field = format!("{section}.{key}");
        let bad = |what: &str| Error::Config(format!("{field}: expected {what}, got `{value}`"));
        let uint = || value.parse::<usize>().map_err(|_| bad("a non-negative integer"));
        let u64v = || value.parse::<u64>().map_err(|_| bad("a non-negative integer"));
        let float = || {
            value
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| bad("a finite number"))
        };
        let widths = || -> Result<Vec<usize>> {
            value
                .split(',')
                .map(|v| v.trim().parse::<usize>().ok().filter(|&w| w > 0))
                .collect::<Option<Vec<_>>>()
                .ok_or_else(|| bad("a comma-separated list of positive integers"))
        };
        match field.as_str() {
            "model.image_size" => self.model.image_size = uint()?,
            "model.depth" => self.model.depth = uint()?,
            "model.word_dim" => self.model.word_dim = uint()?,
            "model.noise_dim" => self.model.noise_dim = uint()?,
            "model.enc_channels" => self.model.enc_channels = widths()?,
            "model.dec_channels" => self.model.dec_channels = widths()?,
            "model.disc_channels" => self.model.disc_channels = widths()?,
            "model.init_seed" => self.model.init_seed = u64v()?,
            "model.feature_seed" => self.model.feature_seed = u64v()?,
            "loss.lambda_rec" => self.loss.lambda_rec = float()?,
            "loss.lambda_damsm" => self.loss.lambda_damsm = float()?,
            "loss.gp_k" => self.loss.gp_k = float()?,
            "loss.gp_p" => self.loss.gp_p = float()?,
            "optim.lr_g" => self.optim.lr_g = float()?,
            "optim.lr_d" => self.optim.lr_d = float()?,
            "optim.beta1" => self.optim.beta1 = float()?,
            "optim.beta2" => self.optim.beta2 = float()?,
            "optim.eps" => self.optim.eps = float()?,
            "train.batch_size" => self.train.batch_size = uint()?,
            "train.steps" => self.train.steps = u64v()?,
            "train.seed" => self.train.seed = u64v()?,
            "train.log_every" => self.train.log_every = u64v()?,
            "train.checkpoint_every" => self.train.checkpoint_every = u64v()?,
            "mask.kind" => self.mask.kind = MaskKind::parse(value)?,
            "mask.ratio_lo" => self.mask.ratio_lo = float()?,
            "mask.ratio_hi" => self.mask.ratio_hi = float()?,
            "mask.center_ratio" => self.mask.center_ratio = float()?,
            "mask.brush_width_min" => self.mask.brush_width_min = uint()?,
            "mask.brush_width_max" => self.mask.brush_width_max = uint()?,
            "mask.walk_length" => self.mask.walk_length = uint()?,
            "eval.scenes" => self.eval.scenes = uint()?,
            "eval.seed" => self.eval.seed = u64v()?,
            "output.dir" => self.output_dir = PathBuf::from(value),
            _ => return Err(Error::Config(format!("unknown key `{field}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        let err = |msg: String| Err(Error::Config(msg));
        match image_size_for_depth(m.depth) {
            Some(s) if s == m.image_size => {}
            _ => {
                return err(format!(
                    "model.image_size = {} does not satisfy image_size = 4 * 2^(depth - 1) for depth {} (expected {})",
                    m.image_size,
                    m.depth,
                    image_size_for_depth(m.depth).map_or("none".into(), |s| s.to_string())
                ))
            }
        }
        if m.image_size < 8 {
            return err(format!("model.image_size = {} is below the 8 pixel minimum", m.image_size));
        }
        for (name, v) in [
            ("model.enc_channels", &m.enc_channels),
            ("model.dec_channels", &m.dec_channels),
            ("model.disc_channels", &m.disc_channels),
        ] {
            if v.len() != m.depth {
                return err(format!("{name} lists {} widths but depth is {}", v.len(), m.depth));
            }
        }
        if m.word_dim == 0 || m.noise_dim == 0 {
            return err("model.word_dim and model.noise_dim must be positive".into());
        }
        let l = &self.loss;
        for (name, v) in [
            ("loss.lambda_rec", l.lambda_rec),
            ("loss.lambda_damsm", l.lambda_damsm),
            ("loss.gp_k", l.gp_k),
            ("loss.gp_p", l.gp_p),
            ("optim.lr_g", self.optim.lr_g),
            ("optim.lr_d", self.optim.lr_d),
            ("optim.eps", self.optim.eps),
        ] {
            if v < 0.0 {
                return err(format!("{name} = {v} must be >= 0"));
            }
        }
        for (name, b) in [("optim.beta1", self.optim.beta1), ("optim.beta2", self.optim.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return err(format!("{name} = {b} must lie in [0, 1)"));
            }
        }
        if self.train.batch_size == 0 {
            return err("train.batch_size must be positive".into());
        }
        let k = &self.mask;
        if !(0.0 <= k.ratio_lo && k.ratio_lo <= k.ratio_hi && k.ratio_hi <= 1.0) {
            return err(format!(
                "mask ratio bounds [{}, {}] must satisfy 0 <= lo <= hi <= 1",
                k.ratio_lo, k.ratio_hi
            ));
        }
        if !(k.center_ratio > 0.0 && k.center_ratio < 1.0) {
            return err(format!("mask.center_ratio = {} must lie in (0, 1)", k.center_ratio));
        }
        if k.brush_width_min == 0 || k.brush_width_min > k.brush_width_max || k.walk_length == 0 {
            return err("mask brush widths must satisfy 1 <= min <= max and walk_length >= 1".into());
        }
        if self.eval.scenes == 0 {
            return err("eval.scenes must be positive".into());
        }
        Ok(())
    }
}
