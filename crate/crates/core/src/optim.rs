//! First-order optimizers over a parameter set.
//!
//! The default is stochastic gradient descent with momentum and a
//! polynomial learning-rate decay `lr * (1 - t/T)^power`. Adam is
//! available behind a config switch. Parameters whose names start with
//! `lcfa.` form a separate group with its own base rate, so the
//! cross-frame attention can learn faster than the pretrained trunk.

use crate::nn::ParamSet;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimConfig {
    pub kind: OptimKind,
    /// Base learning rate for everything outside the cross-frame group.
    pub lr: f64,
    /// Learning rate for parameters under the `lcfa.` prefix.
    pub cross_lr: f64,
    pub momentum: f64,
    /// Exponent in the decay factor `(1 - t/T)^power`.
    pub poly_power: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            kind: OptimKind::Sgd,
            lr: 2e-5,
            cross_lr: 1e-4,
            momentum: 0.9,
            poly_power: 0.9,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Per-parameter group rate, chosen once by name prefix.
pub const CROSS_FRAME_PREFIX: &str = "lcfa.";

pub struct Optimizer<F: Scalar> {
    cfg: OptimConfig,
    total_steps: usize,
    step: usize,
    /// Base rate per parameter, aligned with the set's order.
    rates: Vec<f64>,
    velocity: Vec<Vec<F>>,
    moment2: Vec<Vec<F>>,
}

impl<F: Scalar> Optimizer<F> {
    pub fn new(cfg: OptimConfig, ps: &ParamSet<F>, total_steps: usize) -> Self {
        assert!(total_steps > 0, "optimizer needs a positive horizon");
        let mut rates = Vec::with_capacity(ps.len());
        let mut velocity = Vec::with_capacity(ps.len());
        let mut moment2 = Vec::with_capacity(ps.len());
        for id in ps.ids() {
            let name = ps.name(id);
            rates.push(if name.starts_with(CROSS_FRAME_PREFIX) {
                cfg.cross_lr
            } else {
                cfg.lr
            });
            let n = ps.get(id).numel();
            velocity.push(vec![F::zero(); n]);
            moment2.push(vec![F::zero(); n]);
        }
        Optimizer {
            cfg,
            total_steps,
            step: 0,
            rates,
            velocity,
            moment2,
        }
    }

    /// Decay factor applied to every group at the current step.
    pub fn decay(&self) -> f64 {
        let t = (self.step as f64 / self.total_steps as f64).min(1.0);
        (1.0 - t).powf(self.cfg.poly_power)
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// Applies one update from the gradients stored in the set, then
    /// clears them. Parameters with no gradient are left alone.
    pub fn step(&mut self, ps: &mut ParamSet<F>) {
        let decay = self.decay();
        for (k, id) in ps.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let rate = self.rates[k] * decay;
            let t = ps.get_mut(id);
            let Some(grad) = t.grad.take() else { continue };
            match self.cfg.kind {
                OptimKind::Sgd => {
                    let mu = F::c(self.cfg.momentum);
                    let lr = F::c(rate);
                    for ((p, v), g) in t
                        .data_mut()
                        .iter_mut()
                        .zip(&mut self.velocity[k])
                        .zip(&grad)
                    {
                        *v = mu * *v + *g;
                        *p -= lr * *v;
                    }
                }
                OptimKind::Adam => {
                    let b1 = F::c(self.cfg.beta1);
                    let b2 = F::c(self.cfg.beta2);
                    let eps = F::c(self.cfg.eps);
                    let bias1 = F::c(1.0 - self.cfg.beta1.powi(self.step as i32 + 1));
                    let bias2 = F::c(1.0 - self.cfg.beta2.powi(self.step as i32 + 1));
                    let lr = F::c(rate);
                    for ((p, (m, v)), g) in t
                        .data_mut()
                        .iter_mut()
                        .zip(self.velocity[k].iter_mut().zip(&mut self.moment2[k]))
                        .zip(&grad)
                    {
                        *m = b1 * *m + (F::one() - b1) * *g;
                        *v = b2 * *v + (F::one() - b2) * *g * *g;
                        let mh = *m / bias1;
                        let vh = *v / bias2;
                        *p -= lr * mh / (vh.sqrt() + eps);
                    }
                }
            }
        }
        self.step += 1;
    }
}
