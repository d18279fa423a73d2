//! Parameter storage, seeded initialization, layers and the Adam optimizer.

use std::collections::HashMap;
use std::ops::Index;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const LEAK: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered, named parameter tensors. Order is creation order and is the
/// serialization order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter `{name}`");
        self.index.insert(name.clone(), self.values.len());
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        let i = *self.index.get(name)?;
        Some(&mut self.values[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn numel(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    /// Replaces a value, keeping the declared shape.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = self
            .by_name_mut(name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter `{name}`")))?;
        if slot.shape() != value.shape() {
            return Err(Error::Checkpoint(format!(
                "parameter `{name}` declared {:?}, got {:?}",
                slot.shape(),
                value.shape()
            )));
        }
        *slot = value;
        Ok(())
    }

    /// Records every parameter on `tape`, as gradient-carrying leaves when
    /// `trainable`, otherwise as constants.
    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> Bound<'t> {
        Bound {
            vars: self.values.iter().map(|v| tape.leaf(v.clone(), trainable)).collect(),
        }
    }
}

/// Parameters recorded on one tape, indexable by [`ParamId`].
pub struct Bound<'t> {
    vars: Vec<Var<'t>>,
}

impl<'t> Bound<'t> {
    /// Wraps vars supplied in store order, e.g. by a gradient checker.
    pub fn from_vars(vars: Vec<Var<'t>>) -> Self {
        Self { vars }
    }

    pub fn vars(&self) -> &[Var<'t>] {
        &self.vars
    }

    /// Gradients from the tape's last backward, in store order.
    pub fn grads(&self) -> Vec<Tensor> {
        self.vars
            .iter()
            .map(|v| {
                v.tape()
                    .grad(*v)
                    .unwrap_or_else(|| Tensor::zeros(&v.shape()))
            })
            .collect()
    }
}

impl<'t> Index<ParamId> for Bound<'t> {
    type Output = Var<'t>;

    fn index(&self, id: ParamId) -> &Var<'t> {
        &self.vars[id.0]
    }
}

/// Seeded parameter factory.
pub struct Init<'a> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut ChaCha8Rng,
}

impl Init<'_> {
    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> ParamId {
        let rng = &mut *self.rng;
        let t = Tensor::from_fn(shape, |_| std * rng.sample::<f64, _>(StandardNormal));
        self.store.add(name, t)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.store.add(name, Tensor::zeros(shape))
    }

    pub fn ones(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.store.add(name, Tensor::ones(shape))
    }
}

#[derive(Debug, Clone)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub padding: usize,
}

impl Conv {
    /// Fan-in scaled normal weights.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        init: &mut Init<'_>,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    ) -> Self {
        let std = (1.0 / (c_in * kernel * kernel) as f64).sqrt();
        let weight = init.normal(&format!("{name}.weight"), &[c_out, c_in, kernel, kernel], std);
        let bias = bias.then(|| init.zeros(&format!("{name}.bias"), &[c_out]));
        Self {
            weight,
            bias,
            stride,
            padding,
        }
    }

    pub fn zeroed(
        init: &mut Init<'_>,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        padding: usize,
    ) -> Self {
        let weight = init.zeros(&format!("{name}.weight"), &[c_out, c_in, kernel, kernel]);
        let bias = Some(init.zeros(&format!("{name}.bias"), &[c_out]));
        Self {
            weight,
            bias,
            stride: 1,
            padding,
        }
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        x.conv2d(p[self.weight], self.bias.map(|b| p[b]), self.stride, self.padding)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new(init: &mut Init<'_>, name: &str, n_in: usize, n_out: usize, bias: bool) -> Self {
        let std = (1.0 / n_in as f64).sqrt();
        let weight = init.normal(&format!("{name}.weight"), &[n_out, n_in], std);
        let bias = bias.then(|| init.zeros(&format!("{name}.bias"), &[n_out]));
        Self { weight, bias }
    }

    pub fn zeroed(init: &mut Init<'_>, name: &str, n_in: usize, n_out: usize) -> Self {
        let weight = init.zeros(&format!("{name}.weight"), &[n_out, n_in]);
        let bias = Some(init.zeros(&format!("{name}.bias"), &[n_out]));
        Self { weight, bias }
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        x.linear(p[self.weight], self.bias.map(|b| p[b]))
    }
}

/// Two linear layers with a relu between; the output layer starts at zero
/// so modulation heads begin as the identity.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub hidden: Linear,
    pub out: Linear,
}

impl Mlp {
    pub fn new(init: &mut Init<'_>, name: &str, n_in: usize, n_hidden: usize, n_out: usize) -> Self {
        Self {
            hidden: Linear::new(init, &format!("{name}.0"), n_in, n_hidden, true),
            out: Linear::zeroed(init, &format!("{name}.1"), n_hidden, n_out),
        }
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        self.out.forward(p, self.hidden.forward(p, x)?.relu())
    }
}

/// Single LSTM cell over a `[d]` input with gate order input, forget,
/// candidate, output.
#[derive(Debug, Clone)]
pub struct LstmCell {
    pub gates: Linear,
    pub width: usize,
}

impl LstmCell {
    pub fn new(init: &mut Init<'_>, name: &str, n_in: usize, width: usize) -> Self {
        Self {
            gates: Linear::new(init, &format!("{name}.gates"), n_in + width, 4 * width, true),
            width,
        }
    }

    /// Returns the next `(hidden, cell)`.
    pub fn forward<'t>(
        &self,
        p: &Bound<'t>,
        x: Var<'t>,
        hidden: Var<'t>,
        cell: Var<'t>,
    ) -> Result<(Var<'t>, Var<'t>)> {
        let tape = x.tape();
        let z = self.gates.forward(p, tape.concat(&[x, hidden], 0)?)?;
        let d = self.width;
        let i = z.slice(0, 0, d)?.sigmoid();
        let f = z.slice(0, d, d)?.sigmoid();
        let g = z.slice(0, 2 * d, d)?.tanh();
        let o = z.slice(0, 3 * d, d)?.sigmoid();
        let c = f.mul(cell)?.add(i.mul(g)?)?;
        let h = o.mul(c.tanh())?;
        Ok((h, c))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

/// Adam with bias correction; moment buffers follow store order.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub cfg: AdamConfig,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Adam {
    pub fn new(cfg: AdamConfig, store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store.values().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self {
            cfg,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn update(&mut self, store: &mut ParamStore, grads: &[Tensor]) -> Result<()> {
        if grads.len() != store.len() {
            return Err(Error::Contract(format!(
                "{} gradients for {} parameters",
                grads.len(),
                store.len()
            )));
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.cfg;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (k, g) in grads.iter().enumerate() {
            let m = self.m[k].data_mut();
            let v = self.v[k].data_mut();
            let w = store.values[k].data_mut();
            for (((w, m), v), &g) in w.iter_mut().zip(m).zip(v).zip(g.data()) {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                if lr != 0.0 {
                    *w -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                }
            }
        }
        Ok(())
    }
}
