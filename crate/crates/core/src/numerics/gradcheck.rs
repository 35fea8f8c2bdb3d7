//! Central finite-difference gradient checks.
//!
//! The numeric estimate never touches the backward pass: it only evaluates
//! the forward loss at perturbed points.

use rand::Rng;

use super::{Bindings, ParamId, ParamStore, Scalar, Tape, Tensor, Var};
use crate::error::Result;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    /// Perturbation `h` of the stencil.
    pub step: f64,
    pub probes: usize,
    /// Lower bound of the relative-error denominator, so that gradients
    /// that are zero up to rounding compare on an absolute scale.
    pub floor: f64,
    pub stencil: Stencil,
}

/// Finite-difference formula for the numeric derivative.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stencil {
    /// `(L(x+h) - L(x-h)) / 2h`, error `O(h^2)`.
    Central,
    /// `(-L(x+2h) + 8L(x+h) - 8L(x-h) + L(x-2h)) / 12h`, error `O(h^4)`.
    /// Tolerates the larger steps that keep single-precision rounding
    /// small relative to the difference.
    FivePoint,
}

impl Stencil {
    fn estimate(self, step: f64, mut at: impl FnMut(f64) -> Result<f64>) -> Result<f64> {
        Ok(match self {
            Stencil::Central => (at(step)? - at(-step)?) / (2.0 * step),
            Stencil::FivePoint => {
                let (p1, m1, p2, m2) = (at(step)?, at(-step)?, at(2.0 * step)?, at(-2.0 * step)?);
                (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * step)
            }
        })
    }
}

impl GradCheckConfig {
    pub fn f64_default() -> Self {
        GradCheckConfig {
            step: 1e-5,
            probes: 20,
            floor: 1e-6,
            stencil: Stencil::Central,
        }
    }

    pub fn f32_default() -> Self {
        GradCheckConfig {
            step: 2e-2,
            probes: 20,
            floor: 1e-2,
            stencil: Stencil::FivePoint,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Probe {
    /// Which input (or parameter position in the candidate list).
    pub tensor: usize,
    pub element: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub probes: Vec<Probe>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.probes.iter().map(|p| p.rel_error).fold(0.0, f64::max)
    }

    pub fn passes(&self, tolerance: f64) -> bool {
        !self.probes.is_empty() && self.max_rel_error() <= tolerance
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(floor);
    (analytic - numeric).abs() / denom
}

fn pick<R: Rng + ?Sized>(sizes: &[usize], rng: &mut R) -> (usize, usize) {
    let total: usize = sizes.iter().sum();
    let mut k = rng.gen_range(0..total);
    for (t, &s) in sizes.iter().enumerate() {
        if k < s {
            return (t, k);
        }
        k -= s;
    }
    unreachable!("probe index within total")
}

/// Checks `d loss / d inputs` where `loss` builds a scalar from leaf
/// variables holding `inputs`.
pub fn check_inputs<F, L, R>(
    inputs: &[Tensor<F>],
    loss: L,
    cfg: GradCheckConfig,
    rng: &mut R,
) -> Result<GradCheckReport>
where
    F: Scalar,
    L: Fn(&mut Tape<F>, &[Var]) -> Result<Var>,
    R: Rng + ?Sized,
{
    let eval = |values: &[Tensor<F>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.constant(t.clone())).collect();
        let out = loss(&mut tape, &vars)?;
        Ok(tape.value(out).item().as_f64())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.variable(t.clone())).collect();
    let out = loss(&mut tape, &vars)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<Tensor<F>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let sizes: Vec<usize> = inputs.iter().map(|t| t.len()).collect();
    let mut work = inputs.to_vec();
    let mut report = GradCheckReport::default();
    for _ in 0..cfg.probes {
        let (t, e) = pick(&sizes, rng);
        let x = work[t].data()[e];
        let numeric = cfg.stencil.estimate(cfg.step, |d| {
            work[t].data_mut()[e] = F::from_f64(x.as_f64() + d);
            eval(&work)
        });
        work[t].data_mut()[e] = x;
        let numeric = numeric?;
        let a = analytic[t].data()[e].as_f64();
        report.probes.push(Probe {
            tensor: t,
            element: e,
            analytic: a,
            numeric,
            rel_error: relative_error(a, numeric, cfg.floor),
        });
    }
    Ok(report)
}

/// Checks parameter gradients of a loss built from bound parameters. Probes
/// are drawn uniformly over the elements of `candidates`.
pub fn check_params<F, L, R>(
    store: &mut ParamStore<F>,
    candidates: &[ParamId],
    loss: L,
    cfg: GradCheckConfig,
    rng: &mut R,
) -> Result<GradCheckReport>
where
    F: Scalar,
    L: Fn(&mut Tape<F>, &Bindings) -> Result<Var>,
    R: Rng + ?Sized,
{
    let eval = |store: &ParamStore<F>| -> Result<f64> {
        let mut tape = Tape::new();
        let bound = tape.bind_params(store, |_| false);
        let out = loss(&mut tape, &bound)?;
        Ok(tape.value(out).item().as_f64())
    };

    let mut tape = Tape::new();
    let bound = tape.bind_params(store, |_| true);
    let out = loss(&mut tape, &bound)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<Tensor<F>> = candidates
        .iter()
        .map(|&id| {
            grads
                .param(id)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(store.value(id).shape()))
        })
        .collect();

    let sizes: Vec<usize> = candidates.iter().map(|&id| store.value(id).len()).collect();
    let mut report = GradCheckReport::default();
    for _ in 0..cfg.probes {
        let (t, e) = pick(&sizes, rng);
        let id = candidates[t];
        let x = store.value(id).data()[e];
        let numeric = cfg.stencil.estimate(cfg.step, |d| {
            store.value_mut(id).data_mut()[e] = F::from_f64(x.as_f64() + d);
            eval(store)
        });
        store.value_mut(id).data_mut()[e] = x;
        let numeric = numeric?;
        let a = analytic[t].data()[e].as_f64();
        report.probes.push(Probe {
            tensor: t,
            element: e,
            analytic: a,
            numeric,
            rel_error: relative_error(a, numeric, cfg.floor),
        });
    }
    Ok(report)
}
