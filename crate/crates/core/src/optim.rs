//! AdamW with decoupled weight decay and a bias exclusion set.

use crate::error::{Error, Result};
use crate::tensor::{BoundParams, FloatWidth, Gradients, ParamBank, TensorValue};

#[derive(Clone, Copy, Debug, serde::Serialize, serde::Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamWConfig {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        AdamWConfig {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }
}

/// First/second moment buffers per parameter plus the shared step counter.
pub struct OptimState {
    cfg: AdamWConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: usize,
}

impl OptimState {
    pub fn new(bank: &ParamBank, cfg: AdamWConfig) -> Self {
        let m = bank.entries().iter().map(|e| vec![0.0; e.value.len()]).collect();
        let v = bank.entries().iter().map(|e| vec![0.0; e.value.len()]).collect();
        OptimState { cfg, m, v, step: 0 }
    }

    pub fn lr(&self) -> f64 {
        self.cfg.lr
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    /// One decoupled-weight-decay update. Parameters whose loss gradient is
    /// absent are treated as zero-gradient (their moments still decay).
    /// Weight decay never touches bias-tagged parameters.
    pub fn step(
        &mut self,
        bank: &mut ParamBank,
        grads: &Gradients,
        bound: &BoundParams,
        width: FloatWidth,
    ) -> Result<()> {
        self.step += 1;
        let t = self.step as f64;
        let bias_c1 = 1.0 - self.cfg.beta1.powf(t);
        let bias_c2 = 1.0 - self.cfg.beta2.powf(t);
        for idx in 0..bank.len() {
            let var = &bound.vars()[idx];
            let grad = grads.get(var);
            if let Some(g) = &grad {
                if !g.all_finite() {
                    return Err(Error::Numeric(format!(
                        "non-finite gradient for parameter {}",
                        bank.entries()[idx].name
                    )));
                }
            }
            let is_bias = bank.entries()[idx].is_bias;
            let entry_value = bank.entries()[idx].value.clone();
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            let mut new_data = Vec::with_capacity(entry_value.len());
            for (j, &p) in entry_value.data().iter().enumerate() {
                let g = grad.as_ref().map_or(0.0, |t| t.data()[j]);
                m[j] = self.cfg.beta1 * m[j] + (1.0 - self.cfg.beta1) * g;
                v[j] = self.cfg.beta2 * v[j] + (1.0 - self.cfg.beta2) * g * g;
                let m_hat = m[j] / bias_c1;
                let v_hat = v[j] / bias_c2;
                let mut next = p - self.cfg.lr * m_hat / (v_hat.sqrt() + self.cfg.eps);
                if !is_bias {
                    next -= self.cfg.lr * self.cfg.weight_decay * p;
                }
                new_data.push(width.quantize(next));
            }
            bank.set_value(
                crate::tensor::ParamRef(idx),
                TensorValue::new(entry_value.shape().to_vec(), new_data),
            );
        }
        Ok(())
    }
}
