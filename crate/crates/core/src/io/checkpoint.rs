//! Self-describing binary checkpoints.
//!
//! Layout, little-endian throughout; strings are a `u64` byte length
//! followed by UTF-8, tensors are a name, a `u32` rank, `u64` dims and raw
//! `f64` values:
//!
//! ```text
//! "DAFTCKPT1"  u32 version
//! config text
//! u32 vocabulary size, tokens
//! generator parameter table   (u32 count, tensors)
//! discriminator parameter table
//! generator Adam   (u64 step, f64 lr/beta1/beta2/eps, m table, v table)
//! discriminator Adam
//! RNG: 32-byte seed, u64 stream, u128 word position
//! u64 step
//! ```

use std::fs;
use std::path::Path;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::Config;
use crate::error::{Error, Result};
use crate::harness::train::Trainer;
use crate::nn::{Adam, AdamConfig, ParamStore};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 9] = b"DAFTCKPT1";
pub const VERSION: u32 = 1;

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u64(s.len() as u64);
        self.0.extend_from_slice(s.as_bytes());
    }
    fn tensor(&mut self, name: &str, t: &Tensor) {
        self.str(name);
        self.u32(t.ndim() as u32);
        for &d in t.shape() {
            self.u64(d as u64);
        }
        for &v in t.data() {
            self.f64(v);
        }
    }
    fn table<'a>(&mut self, items: impl ExactSizeIterator<Item = (&'a str, &'a Tensor)>) {
        self.u32(items.len() as u32);
        for (name, t) in items {
            self.tensor(name, t);
        }
    }
    fn adam(&mut self, adam: &Adam, store: &ParamStore) {
        self.u64(adam.step);
        for v in [adam.cfg.lr, adam.cfg.beta1, adam.cfg.beta2, adam.cfg.eps] {
            self.f64(v);
        }
        let names: Vec<&str> = store.iter().map(|(n, _)| n).collect();
        self.table(names.iter().copied().zip(&adam.m));
        self.table(names.iter().copied().zip(&adam.v));
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn u128(&mut self) -> Result<u128> {
        Ok(u128::from_le_bytes(self.take(16)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn len(&mut self) -> Result<usize> {
        let n = self.u64()?;
        usize::try_from(n)
            .ok()
            .filter(|&n| n <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("implausible length {n}")))
    }
    fn str(&mut self) -> Result<String> {
        let n = self.len()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("invalid UTF-8".into()))
    }
    fn tensor(&mut self) -> Result<(String, Tensor)> {
        let name = self.str()?;
        let rank = self.u32()? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(self.len()?);
        }
        let n: usize = shape.iter().product();
        if n.checked_mul(8).is_none_or(|b| b > self.bytes.len()) {
            return Err(Error::Checkpoint(format!("tensor `{name}` too large")));
        }
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(self.f64()?);
        }
        let t = Tensor::new(shape, data).map_err(|e| Error::Checkpoint(format!("tensor `{name}`: {e}")))?;
        Ok((name, t))
    }
    /// Reads a table and checks it against the declared names and shapes.
    fn table_into(&mut self, what: &str, expect: &ParamStore) -> Result<Vec<Tensor>> {
        let count = self.u32()? as usize;
        if count != expect.len() {
            return Err(Error::Checkpoint(format!(
                "{what}: {count} entries, model declares {}",
                expect.len()
            )));
        }
        let mut out = Vec::with_capacity(count);
        for (name, declared) in expect.iter() {
            let (got, t) = self.tensor()?;
            if got != name {
                return Err(Error::Checkpoint(format!("{what}: expected `{name}`, found `{got}`")));
            }
            if t.shape() != declared.shape() {
                return Err(Error::Checkpoint(format!(
                    "{what}: `{name}` declared {:?}, stored {:?}",
                    declared.shape(),
                    t.shape()
                )));
            }
            out.push(t);
        }
        Ok(out)
    }
    fn adam(&mut self, what: &str, store: &ParamStore) -> Result<Adam> {
        let step = self.u64()?;
        let cfg = AdamConfig {
            lr: self.f64()?,
            beta1: self.f64()?,
            beta2: self.f64()?,
            eps: self.f64()?,
        };
        let m = self.table_into(&format!("{what} first moments"), store)?;
        let v = self.table_into(&format!("{what} second moments"), store)?;
        Ok(Adam { cfg, step, m, v })
    }
}

pub fn to_bytes(t: &Trainer) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(MAGIC);
    w.u32(VERSION);
    w.str(&t.cfg.to_text());
    let vocab = t.model.vocab.tokens();
    w.u32(vocab.len() as u32);
    for tok in vocab {
        w.str(tok);
    }
    w.table(t.model.gen_params.iter().collect::<Vec<_>>().into_iter());
    w.table(t.model.disc_params.iter().collect::<Vec<_>>().into_iter());
    w.adam(&t.adam_g, &t.model.gen_params);
    w.adam(&t.adam_d, &t.model.disc_params);
    w.0.extend_from_slice(&t.rng.get_seed());
    w.u64(t.rng.get_stream());
    w.0.extend_from_slice(&t.rng.get_word_pos().to_le_bytes());
    w.u64(t.step);
    w.0
}

pub fn from_bytes(bytes: &[u8]) -> Result<Trainer> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(MAGIC.len())? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let cfg = Config::parse(&r.str()?)?;
    let mut trainer = Trainer::new(cfg)?;
    let n = r.u32()? as usize;
    let mut vocab = Vec::with_capacity(n.min(1024));
    for _ in 0..n {
        vocab.push(r.str()?);
    }
    if vocab != trainer.model.vocab.tokens() {
        return Err(Error::Checkpoint("vocabulary differs from this build's".into()));
    }
    let m = &mut trainer.model;
    for (what, store) in [("generator", &mut m.gen_params), ("discriminator", &mut m.disc_params)] {
        let values = r.table_into(what, store)?;
        let names: Vec<String> = store.iter().map(|(n, _)| n.to_string()).collect();
        for (name, v) in names.iter().zip(values) {
            store.set(name, v)?;
        }
    }
    trainer.adam_g = r.adam("generator Adam", &trainer.model.gen_params)?;
    trainer.adam_d = r.adam("discriminator Adam", &trainer.model.disc_params)?;
    let seed: [u8; 32] = r.take(32)?.try_into().unwrap();
    let stream = r.u64()?;
    let word_pos = r.u128()?;
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(stream);
    rng.set_word_pos(word_pos);
    trainer.rng = rng;
    trainer.step = r.u64()?;
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(trainer)
}

pub fn save(path: &Path, t: &Trainer) -> Result<()> {
    Ok(fs::write(path, to_bytes(t))?)
}

pub fn load(path: &Path) -> Result<Trainer> {
    let bytes = fs::read(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    from_bytes(&bytes)
}
