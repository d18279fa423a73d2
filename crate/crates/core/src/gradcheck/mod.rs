//! Central finite-difference verification of tape gradients.
//!
//! The checker only ever evaluates forward values when estimating
//! derivatives, so it stays independent of every backward rule it audits.

pub mod model_suites;
pub mod suites;

use rand::seq::index::sample;
use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct FdConfig {
    pub step: f64,
    pub rel_tol: f64,
    /// Coordinates sampled per input tensor; tensors at or below this size
    /// are checked exhaustively.
    pub coords_per_input: usize,
}

impl Default for FdConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            rel_tol: 1e-4,
            coords_per_input: 8,
        }
    }
}

/// Outcome of checking one scalar function at one point.
#[derive(Debug, Clone, Default)]
pub struct FdOutcome {
    pub checked: usize,
    /// Coordinates skipped because the function is not smooth within one
    /// step of the point (a kink crossing such as relu at 0).
    pub nonsmooth: usize,
    pub failures: usize,
    pub max_rel_err: f64,
}

impl FdOutcome {
    pub fn merge(&mut self, other: &FdOutcome) {
        self.checked += other.checked;
        self.nonsmooth += other.nonsmooth;
        self.failures += other.failures;
        self.max_rel_err = self.max_rel_err.max(other.max_rel_err);
    }

    pub fn passed(&self) -> bool {
        self.failures == 0 && self.checked > 0 && self.nonsmooth * 10 <= self.checked
    }
}

fn eval<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    Ok(f(&tape, &vars)?.item())
}

/// Analytic gradients of `f` at `inputs` via [`Tape::backward`].
/// `f` builds a scalar from leaves bound to `inputs` (same order).
pub fn analytic_grads<F>(f: &F, inputs: &[Tensor]) -> Result<(f64, Vec<Tensor>)>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let y = f(&tape, &vars)?;
    tape.backward(y)?;
    let grads = vars
        .iter()
        .map(|v| tape.grad(*v).expect("leaf gradient populated"))
        .collect();
    Ok((y.item(), grads))
}

/// Compares analytic gradients against central differences on a sample of
/// coordinates of every input.
pub fn check<F>(f: &F, inputs: &[Tensor], cfg: &FdConfig, rng: &mut impl Rng) -> Result<FdOutcome>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let (_, grads) = analytic_grads(f, inputs)?;
    let mut outcome = FdOutcome::default();
    let mut point: Vec<Tensor> = inputs.to_vec();
    for (k, grad) in grads.iter().enumerate() {
        let n = point[k].numel();
        let coords: Vec<usize> = if n <= cfg.coords_per_input {
            (0..n).collect()
        } else {
            sample(rng, n, cfg.coords_per_input).into_vec()
        };
        for i in coords {
            let analytic = grad.data()[i];
            let (numeric, noise) = central_difference(f, &mut point, k, i, cfg.step)?;
            let mut err = rel_excess(analytic, numeric, noise);
            if err > cfg.rel_tol {
                let (half, half_noise) = central_difference(f, &mut point, k, i, cfg.step / 2.0)?;
                if rel_excess(numeric, half, noise.max(half_noise)) > cfg.rel_tol {
                    outcome.nonsmooth += 1;
                    continue;
                }
                err = err.min(rel_excess(analytic, half, half_noise));
            }
            outcome.checked += 1;
            outcome.max_rel_err = outcome.max_rel_err.max(err);
            if err > cfg.rel_tol {
                outcome.failures += 1;
            }
        }
    }
    Ok(outcome)
}

/// Returns the derivative estimate and the round-off noise floor of that
/// estimate.
fn central_difference<F>(
    f: &F,
    point: &mut [Tensor],
    k: usize,
    i: usize,
    h: f64,
) -> Result<(f64, f64)>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let orig = point[k].data()[i];
    point[k].data_mut()[i] = orig + h;
    let plus = eval(f, point)?;
    point[k].data_mut()[i] = orig - h;
    let minus = eval(f, point)?;
    point[k].data_mut()[i] = orig;
    let noise = 64.0 * f64::EPSILON * plus.abs().max(minus.abs()) / h;
    Ok(((plus - minus) / (2.0 * h), noise))
}

/// Relative error after discounting the finite-difference noise floor.
pub fn rel_excess(a: f64, b: f64, noise: f64) -> f64 {
    let diff = ((a - b).abs() - noise).max(0.0);
    if diff == 0.0 {
        0.0
    } else {
        diff / a.abs().max(b.abs())
    }
}
