use serde::{Deserialize, Serialize};

use crate::error::{NumericsError, Result};
use crate::params::ParamStore;

/// Update rule applied by [`Optimizer::step`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "kebab-case", deny_unknown_fields)]
pub enum OptimizerRule {
    /// `v <- momentum * v + g; p <- p - lr * v`.
    SgdMomentum { momentum: f64 },
    /// Bias-corrected adaptive moment estimation.
    AdaptiveMoment { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerRule {
    pub fn sgd(momentum: f64) -> Self {
        OptimizerRule::SgdMomentum { momentum }
    }

    pub fn adam() -> Self {
        OptimizerRule::AdaptiveMoment {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Optimizer {
    rule: OptimizerRule,
    lr: f64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    steps: u64,
}

impl Optimizer {
    /// `lr = 0` is accepted and turns every step into a no-op.
    pub fn new(rule: OptimizerRule, lr: f64) -> Result<Self> {
        if !(lr.is_finite() && lr >= 0.0) {
            return Err(NumericsError::InvalidArgument(format!(
                "learning rate must be finite and non-negative, got {lr}"
            )));
        }
        Ok(Self {
            rule,
            lr,
            first: Vec::new(),
            second: Vec::new(),
            steps: 0,
        })
    }

    pub fn rule(&self) -> OptimizerRule {
        self.rule
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update from the accumulated gradients, then zeroes them.
    ///
    /// A non-finite gradient aborts before any parameter is touched.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        for id in store.ids() {
            if !store.grad(id).data().iter().all(|g| g.is_finite()) {
                return Err(NumericsError::NonFiniteGradient {
                    param: store.name(id).to_string(),
                });
            }
        }
        if self.first.len() != store.len() {
            self.first = store.ids().map(|id| vec![0.0; store.value(id).len()]).collect();
            self.second = self.first.clone();
        }
        self.steps += 1;
        let lr = self.lr;
        for id in store.ids().collect::<Vec<_>>() {
            let grad = store.grad(id).data().to_vec();
            let mut updated = store.value(id).data().to_vec();
            let first = &mut self.first[id.index()];
            match self.rule {
                OptimizerRule::SgdMomentum { momentum } => {
                    for ((p, v), g) in updated.iter_mut().zip(first.iter_mut()).zip(&grad) {
                        *v = momentum * *v + g;
                        *p -= lr * *v;
                    }
                }
                OptimizerRule::AdaptiveMoment { beta1, beta2, eps } => {
                    let second = &mut self.second[id.index()];
                    let t = self.steps as i32;
                    let c1 = 1.0 - beta1.powi(t);
                    let c2 = 1.0 - beta2.powi(t);
                    for (((p, m), v), &g) in updated
                        .iter_mut()
                        .zip(first.iter_mut())
                        .zip(second.iter_mut())
                        .zip(&grad)
                    {
                        *m = beta1 * *m + (1.0 - beta1) * g;
                        *v = beta2 * *v + (1.0 - beta2) * g * g;
                        let m_hat = *m / c1;
                        let v_hat = *v / c2;
                        *p -= lr * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }
            store.value_mut(id).assign(&updated).map_err(|_| {
                NumericsError::NonFiniteGradient {
                    param: store.name(id).to_string(),
                }
            })?;
            store.grad_mut(id).data_mut().fill(0.0);
        }
        Ok(())
    }
}
