#![allow(dead_code)]

use daft_core::encoder::Encoder;
use daft_core::mask::MaskMetric;
use daft_core::nn::{Init, ParamStore};
use daft_core::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn build<T>(seed: u64, make: impl FnOnce(&mut Init<'_>) -> T) -> (T, ParamStore) {
    let mut store = ParamStore::new();
    let mut r = rng(seed);
    let module = make(&mut Init {
        store: &mut store,
        rng: &mut r,
    });
    (module, store)
}

/// Overwrites every parameter with N(0, scale^2) draws.
pub fn randomize(store: &mut ParamStore, rng: &mut impl Rng, scale: f64) {
    let entries: Vec<(String, Vec<usize>)> = store.iter().map(|(n, t)| (n.to_string(), t.shape().to_vec())).collect();
    for (name, shape) in entries {
        store.set(&name, randn(rng, &shape, scale)).unwrap();
    }
}

pub fn randn(rng: &mut impl Rng, shape: &[usize], scale: f64) -> Tensor {
    Tensor::from_fn(shape, |_| scale * rng.sample::<f64, _>(StandardNormal))
}

pub fn uniform(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

pub fn random_mask(rng: &mut impl Rng, h: usize, w: usize, p: f64) -> MaskMetric {
    let cells = (0..h * w).map(|_| u8::from(rng.random_bool(p))).collect();
    MaskMetric::new(h, w, cells).unwrap()
}

pub fn assert_close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len(), "length mismatch");
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        let scale = 1.0f64.max(x.abs()).max(y.abs());
        assert!((x - y).abs() <= tol * scale, "index {i}: {x} vs {y}");
    }
}

/// 16 px, depth 3, narrow widths: quick enough for multi-step training tests.
pub fn tiny_config() -> daft_core::config::Config {
    let mut cfg = daft_core::config::Config::default();
    cfg.model.image_size = 16;
    cfg.model.depth = 3;
    cfg.model.word_dim = 4;
    cfg.model.noise_dim = 4;
    cfg.model.enc_channels = vec![3, 4, 4];
    cfg.model.dec_channels = vec![4, 4, 3];
    cfg.model.disc_channels = vec![3, 4, 4];
    cfg.train.batch_size = 2;
    cfg.train.steps = 3;
    cfg.eval.scenes = 3;
    cfg
}

/// Brute-force receptive-field scan: an output cell is valid iff some
/// in-bounds input cell under its window is valid.
pub fn oracle_update(m: &MaskMetric, k: usize, s: usize, p: usize) -> MaskMetric {
    let oh = (m.height() + 2 * p - k) / s + 1;
    let ow = (m.width() + 2 * p - k) / s + 1;
    let mut cells = vec![1u8; oh * ow];
    for oy in 0..oh {
        for ox in 0..ow {
            'scan: for ky in 0..k {
                for kx in 0..k {
                    let iy = (oy * s + ky) as isize - p as isize;
                    let ix = (ox * s + kx) as isize - p as isize;
                    if iy < 0 || ix < 0 || iy >= m.height() as isize || ix >= m.width() as isize {
                        continue;
                    }
                    if m.get(iy as usize, ix as usize) == 0 {
                        cells[oy * ow + ox] = 0;
                        break 'scan;
                    }
                }
            }
        }
    }
    MaskMetric::new(oh, ow, cells).unwrap()
}

/// Largest change in any valid-region encoder feature when only invalid
/// input pixels are perturbed.
pub fn leakage_max_diff(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (enc, mut store) = build(seed, |i| Encoder::new(i, &[4, 6, 6, 8], 3).unwrap());
    randomize(&mut store, &mut r, 0.5);
    let density = r.random_range(0.1..0.9);
    let mask = random_mask(&mut r, 32, 32, density);
    let a = randn(&mut r, &[3, 32, 32], 1.0);
    let mut b = a.clone();
    for (i, v) in b.data_mut().iter_mut().enumerate() {
        if mask.cells()[i % 1024] == 1 {
            *v += r.random_range(-5.0..5.0);
        }
    }
    let tape = Tape::new();
    let p = store.bind(&tape, false);
    let pa = enc.encode(&p, tape.constant(a), &mask).unwrap();
    let pb = enc.encode(&p, tape.constant(b), &mask).unwrap();
    let mut worst = 0.0f64;
    for level in 1..pa.features.len() {
        let (fa, fb) = (pa.features[level].value(), pb.features[level].value());
        let area = pa.masks[level].cells().len();
        for i in 0..fa.numel() {
            if pa.masks[level].cells()[i % area] == 0 {
                worst = worst.max((fa.data()[i] - fb.data()[i]).abs());
            }
        }
    }
    worst
}

