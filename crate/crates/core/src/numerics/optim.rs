use super::{ParamId, ParamStore, Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OptimizerKind {
    Adam { beta1: f64, beta2: f64, eps: f64 },
    Sgd,
}

impl OptimizerKind {
    pub const fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First-order optimizer over a fixed set of parameters.
///
/// Parameters without a gradient at step time are skipped entirely: their
/// values and moment buffers stay untouched.
#[derive(Clone, Debug)]
pub struct Optimizer<F> {
    kind: OptimizerKind,
    learning_rate: f64,
    clip_norm: Option<f64>,
    params: Vec<ParamId>,
    first: Vec<Tensor<F>>,
    second: Vec<Tensor<F>>,
    steps: u64,
}

impl<F: Scalar> Optimizer<F> {
    pub fn new(kind: OptimizerKind, learning_rate: f64, params: Vec<ParamId>, store: &ParamStore<F>) -> Self {
        let moments = |use_it: bool| {
            params
                .iter()
                .map(|&id| {
                    if use_it {
                        Tensor::zeros(store.value(id).shape())
                    } else {
                        Tensor::zeros(&[0])
                    }
                })
                .collect()
        };
        let is_adam = matches!(kind, OptimizerKind::Adam { .. });
        Optimizer {
            kind,
            learning_rate,
            clip_norm: None,
            first: moments(is_adam),
            second: moments(is_adam),
            params,
            steps: 0,
        }
    }

    /// Rescales this optimizer's gradients to at most `max_norm` global L2
    /// norm before every update.
    pub fn with_clip_norm(mut self, max_norm: Option<f64>) -> Self {
        self.clip_norm = max_norm;
        self
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn params(&self) -> &[ParamId] {
        &self.params
    }

    pub fn owns(&self, id: ParamId) -> bool {
        self.params.contains(&id)
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn learning_rate(&self) -> f64 {
        self.learning_rate
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.learning_rate = lr;
    }

    /// Moment buffers for one owned parameter (Adam only).
    pub fn moments(&self, id: ParamId) -> Option<(&Tensor<F>, &Tensor<F>)> {
        let k = self.params.iter().position(|&p| p == id)?;
        match self.kind {
            OptimizerKind::Adam { .. } => Some((&self.first[k], &self.second[k])),
            OptimizerKind::Sgd => None,
        }
    }

    /// Global L2 norm of the gradients this optimizer would apply.
    pub fn grad_norm(&self, store: &ParamStore<F>) -> f64 {
        self.params
            .iter()
            .filter_map(|&id| store.grad(id))
            .map(|g| g.squared_norm())
            .sum::<f64>()
            .sqrt()
    }

    /// Applies one update in place. Gradients are left for the caller to
    /// clear.
    pub fn step(&mut self, store: &mut ParamStore<F>) -> Result<()> {
        if !self.params.iter().any(|&id| store.grad(id).is_some()) {
            let first = self
                .params
                .first()
                .map(|&id| store.name(id).to_string())
                .unwrap_or_default();
            return Err(Error::MissingGrad(first));
        }
        let clip = match self.clip_norm {
            Some(max) => {
                let norm = self.grad_norm(store);
                if norm > max {
                    max / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        self.steps += 1;
        let lr = F::from_f64(self.learning_rate);
        let clip = F::from_f64(clip);
        for (k, &id) in self.params.iter().enumerate() {
            let param = store.get_mut(id);
            let Some(grad) = param.grad.as_ref() else { continue };
            match self.kind {
                OptimizerKind::Sgd => {
                    for (p, &g) in param.value.data_mut().iter_mut().zip(grad.data()) {
                        *p -= lr * clip * g;
                    }
                }
                OptimizerKind::Adam { beta1, beta2, eps } => {
                    let t = self.steps as i32;
                    let c1 = F::from_f64(1.0 - beta1.powi(t));
                    let c2 = F::from_f64(1.0 - beta2.powi(t));
                    let (b1, b2, eps) = (F::from_f64(beta1), F::from_f64(beta2), F::from_f64(eps));
                    let m = self.first[k].data_mut();
                    let v = self.second[k].data_mut();
                    for (i, (p, &g)) in param.value.data_mut().iter_mut().zip(grad.data()).enumerate() {
                        let g = g * clip;
                        m[i] = b1 * m[i] + (F::one() - b1) * g;
                        v[i] = b2 * v[i] + (F::one() - b2) * g * g;
                        let m_hat = m[i] / c1;
                        let v_hat = v[i] / c2;
                        *p -= lr * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}
