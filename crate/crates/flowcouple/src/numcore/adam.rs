//! Adam optimizer with bias correction.

use super::net::{NetGradients, VelocityNet};
use crate::{Error, Result};

/// Optimizer state; moment arrays are parallel to the network's parameter
/// arrays and start at zero.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub first_moment: Vec<Vec<f64>>,
    pub second_moment: Vec<Vec<f64>>,
    pub step_count: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub learning_rate: f64,
}

impl AdamState {
    pub fn new(net: &VelocityNet, learning_rate: f64) -> Self {
        let shapes: Vec<usize> = net.param_arrays().iter().map(|a| a.len()).collect();
        AdamState {
            first_moment: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            second_moment: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            step_count: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            learning_rate,
        }
    }

    /// One bias-corrected Adam update. On a non-finite gradient the update is
    /// aborted and neither parameters nor moments change.
    pub fn step(&mut self, net: &mut VelocityNet, grads: &NetGradients) -> Result<()> {
        for (params, g) in net.param_arrays().iter().zip(&grads.arrays) {
            if params.len() != g.len() {
                return Err(Error::DimensionMismatch {
                    context: "adam_step",
                    expected: params.len(),
                    actual: g.len(),
                });
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteGradient {
                    step: self.step_count + 1,
                });
            }
        }
        self.step_count += 1;
        let t = self.step_count as f64;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);
        for ((params, g), (m, v)) in net
            .param_arrays_mut()
            .into_iter()
            .zip(&grads.arrays)
            .zip(self.first_moment.iter_mut().zip(self.second_moment.iter_mut()))
        {
            for i in 0..params.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                params[i] -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
        Ok(())
    }
}
