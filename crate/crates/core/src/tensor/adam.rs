//! Named parameter tensors with Adam state.

use super::{EngineError, EngineResult, Tensor};

/// Adam hyperparameters. The defaults follow the common GAN recipe.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            lr: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamHyper {
    pub fn validate(&self) -> EngineResult<()> {
        if self.lr <= 0.0 {
            return Err(EngineError::InvalidArg {
                op: "adam",
                detail: format!("lr must be > 0, got {}", self.lr),
            });
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(EngineError::InvalidArg {
                    op: "adam",
                    detail: format!("{name} must be in [0, 1), got {b}"),
                });
            }
        }
        Ok(())
    }
}

/// One learnable tensor: values plus Adam first/second moments.
#[derive(Debug, Clone)]
pub struct ParamTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
    pub moment1: Vec<f64>,
    pub moment2: Vec<f64>,
    pub step_count: u64,
}

impl ParamTensor {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, values: Vec<f64>) -> Self {
        let n = values.len();
        debug_assert_eq!(n, shape.iter().product::<usize>());
        ParamTensor {
            name: name.into(),
            shape,
            values,
            moment1: vec![0.0; n],
            moment2: vec![0.0; n],
            step_count: 0,
        }
    }

    /// Current values as a constant tensor (for tape registration).
    pub fn tensor(&self) -> Tensor {
        Tensor::new(self.shape.clone(), self.values.clone()).expect("param shape consistent")
    }

    /// One Adam update with bias correction.
    pub fn adam_step(&mut self, grad: &[f64], hp: &AdamHyper) -> EngineResult<()> {
        hp.validate()?;
        if grad.len() != self.values.len() {
            return Err(EngineError::ShapeMismatch {
                op: "adam",
                detail: format!(
                    "gradient length {} vs parameter {} ({})",
                    grad.len(),
                    self.values.len(),
                    self.name
                ),
            });
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - hp.beta1.powi(t);
        let bc2 = 1.0 - hp.beta2.powi(t);
        for ((value, &g), (m1, m2)) in self
            .values
            .iter_mut()
            .zip(grad)
            .zip(self.moment1.iter_mut().zip(self.moment2.iter_mut()))
        {
            *m1 = hp.beta1 * *m1 + (1.0 - hp.beta1) * g;
            *m2 = hp.beta2 * *m2 + (1.0 - hp.beta2) * g * g;
            let m_hat = *m1 / bc1;
            let v_hat = *m2 / bc2;
            *value -= hp.lr * m_hat / (v_hat.sqrt() + hp.eps);
        }
        Ok(())
    }
}
