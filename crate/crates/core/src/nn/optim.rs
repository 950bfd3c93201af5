use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::tensor::Tensor;

/// First-order update rule.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum UpdateRule {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Default for UpdateRule {
    fn default() -> Self {
        UpdateRule::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub rule: UpdateRule,
    /// Rescale the joint gradient to at most this L2 norm before stepping.
    pub max_grad_norm: Option<f64>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            rule: UpdateRule::default(),
            max_grad_norm: None,
        }
    }
}

/// Learning rate, moment accumulators and step count for one parameter
/// group. Accumulators mirror the parameter shapes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub config: OptimizerConfig,
    pub learning_rate: f64,
    first_moment: Vec<Tensor>,
    second_moment: Vec<Tensor>,
    step: u64,
}

impl OptimizerState {
    pub fn new(config: OptimizerConfig, learning_rate: f64, params: &[&Tensor]) -> Result<Self> {
        if !(learning_rate > 0.0 && learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {learning_rate}")));
        }
        let zeros: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        let second = match config.rule {
            UpdateRule::Sgd => Vec::new(),
            UpdateRule::Adam { .. } => zeros.clone(),
        };
        let first = match config.rule {
            UpdateRule::Sgd => Vec::new(),
            UpdateRule::Adam { .. } => zeros,
        };
        Ok(Self {
            config,
            learning_rate,
            first_moment: first,
            second_moment: second,
            step: 0,
        })
    }

    pub fn sgd(learning_rate: f64, params: &[&Tensor]) -> Result<Self> {
        Self::new(
            OptimizerConfig {
                rule: UpdateRule::Sgd,
                max_grad_norm: None,
            },
            learning_rate,
            params,
        )
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self) -> &[Tensor] {
        &self.first_moment
    }

    pub fn second_moment(&self) -> &[Tensor] {
        &self.second_moment
    }

    /// Applies one update. `term` names the loss in diagnostics when a
    /// gradient is non-finite; parameters are left untouched in that case.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor], term: &str) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::shape("optimizer gradients", params.len(), grads.len()));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if !p.same_shape(g) {
                return Err(Error::shape(
                    format!("optimizer gradient {i}"),
                    format!("{:?}", p.shape()),
                    format!("{:?}", g.shape()),
                ));
            }
            if !g.is_finite() {
                return Err(Error::non_finite(format!("gradient of {term}")));
            }
        }
        let clip = match self.config.max_grad_norm {
            Some(max) => {
                let norm = grads.iter().map(Tensor::squared_norm).sum::<f64>().sqrt();
                if norm > max {
                    max / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };

        self.step += 1;
        let lr = self.learning_rate;
        match self.config.rule {
            UpdateRule::Sgd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    for (w, gi) in p.data_mut().iter_mut().zip(g.data()) {
                        *w -= lr * clip * gi;
                    }
                }
            }
            UpdateRule::Adam { beta1, beta2, eps } => {
                let t = self.step as i32;
                let bc1 = 1.0 - beta1.powi(t);
                let bc2 = 1.0 - beta2.powi(t);
                for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
                    let m = self.first_moment[i].data_mut();
                    let v = self.second_moment[i].data_mut();
                    for (j, w) in p.data_mut().iter_mut().enumerate() {
                        let gj = clip * g.data()[j];
                        m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
                        v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
                        let m_hat = m[j] / bc1;
                        let v_hat = v[j] / bc2;
                        *w -= lr * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}
