//! AdamW with decoupled weight decay.

use crate::error::{CoreError, Result};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamW {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        AdamW {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// First/second moment buffers plus the step counter.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptimizerState {
    pub first: Vec<Tensor>,
    pub second: Vec<Tensor>,
    pub step: u64,
}

impl OptimizerState {
    pub fn for_params<'a, I>(params: I) -> Self
    where
        I: IntoIterator<Item = &'a Tensor>,
    {
        let shapes: Vec<Vec<usize>> = params.into_iter().map(|p| p.shape().to_vec()).collect();
        OptimizerState {
            first: shapes.iter().map(|s| Tensor::zeros(s.clone())).collect(),
            second: shapes.iter().map(|s| Tensor::zeros(s.clone())).collect(),
            step: 0,
        }
    }
}

impl AdamW {
    /// One update over all parameters. `params` and `grads` are aligned with
    /// the moment buffers; `names` is used only for diagnostics.
    pub fn step(
        &self,
        state: &mut OptimizerState,
        names: &[String],
        params: &mut [&mut Tensor],
        grads: &[Tensor],
    ) -> Result<()> {
        assert_eq!(params.len(), grads.len());
        assert_eq!(params.len(), state.first.len());
        state.step += 1;
        let t = state.step;
        let bc1 = 1.0 - self.beta1.powi(t as i32);
        let bc2 = 1.0 - self.beta2.powi(t as i32);
        for (i, (param, grad)) in params.iter_mut().zip(grads).enumerate() {
            if !grad.all_finite() {
                return Err(CoreError::NonFinite(format!(
                    "gradient for parameter '{}' at step {t}",
                    names.get(i).map(String::as_str).unwrap_or("?")
                )));
            }
            assert_eq!(param.shape(), grad.shape(), "gradient shape for parameter {i}");
            let m = state.first[i].data_mut();
            let v = state.second[i].data_mut();
            for (((p, g), m), v) in
                param.data_mut().iter_mut().zip(grad.data()).zip(m.iter_mut()).zip(v.iter_mut())
            {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p -= self.learning_rate * self.weight_decay * *p;
                *p -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
        Ok(())
    }
}
