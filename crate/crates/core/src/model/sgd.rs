use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Matrix, Real};

/// Heavy-ball SGD: `d = g + wd·θ`, `v ← μ·v + d`, `θ ← θ - lr·v`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct Sgd<T> {
    pub momentum: T,
    velocity: Vec<Matrix<T>>,
}

impl<T: Real> Sgd<T> {
    pub fn new(momentum: T, params: &[&Matrix<T>]) -> Self {
        Self {
            momentum,
            velocity: params
                .iter()
                .map(|p| Matrix::zeros(p.rows(), p.cols()))
                .collect(),
        }
    }

    pub fn velocity(&self) -> &[Matrix<T>] {
        &self.velocity
    }

    /// One update. `weight_decay[i]` is the decay for parameter `i`; every
    /// parameter needs a gradient.
    pub fn step(
        &mut self,
        params: &mut [&mut Matrix<T>],
        grads: &[Option<&Matrix<T>>],
        lr: T,
        weight_decay: &[T],
    ) -> Result<()> {
        if params.len() != self.velocity.len()
            || grads.len() != params.len()
            || weight_decay.len() != params.len()
        {
            return Err(Error::shape(
                "sgd_step",
                format!(
                    "{} params, {} grads, {} decays, {} velocity buffers",
                    params.len(),
                    grads.len(),
                    weight_decay.len(),
                    self.velocity.len()
                ),
            ));
        }
        for (i, grad) in grads.iter().enumerate() {
            let grad = grad.ok_or_else(|| Error::State(format!("parameter {i} has no gradient")))?;
            params[i].check_same_shape(grad, "sgd_step")?;
        }
        for (((param, grad), vel), &wd) in params
            .iter_mut()
            .zip(grads)
            .zip(&mut self.velocity)
            .zip(weight_decay)
        {
            let grad = grad.expect("checked above");
            for ((p, &g), v) in param
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(vel.data_mut())
            {
                let d = g + wd * *p;
                *v = self.momentum * *v + d;
                *p = *p - lr * *v;
            }
        }
        Ok(())
    }
}
