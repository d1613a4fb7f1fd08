use std::collections::BTreeMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::{AutodiffError, Tensor};

/// Half-cosine decay from `base_lr` at step 0 to `min_lr` at `total_steps`.
pub fn cosine_lr(step: u64, total_steps: u64, base_lr: f64, min_lr: f64) -> Result<f64, AutodiffError> {
    if total_steps == 0 || step > total_steps {
        return Err(AutodiffError::StepOutOfRange { step, total_steps });
    }
    let progress = step as f64 / total_steps as f64;
    Ok(min_lr + 0.5 * (base_lr - min_lr) * (1.0 + (PI * progress).cos()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub base_lr: f64,
    pub min_lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            base_lr: 1e-4,
            min_lr: 1e-6,
            weight_decay: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// AdamW with decoupled weight decay and a cosine learning-rate schedule
/// spanning `total_steps` updates.
#[derive(Clone, Debug)]
pub struct AdamWState {
    config: AdamWConfig,
    step: u64,
    total_steps: u64,
    first_moment: BTreeMap<String, Vec<f64>>,
    second_moment: BTreeMap<String, Vec<f64>>,
}

impl AdamWState {
    pub fn new(config: AdamWConfig, total_steps: u64) -> Self {
        AdamWState {
            config,
            step: 0,
            total_steps: total_steps.max(1),
            first_moment: BTreeMap::new(),
            second_moment: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn total_steps(&self) -> u64 {
        self.total_steps
    }

    pub fn config(&self) -> &AdamWConfig {
        &self.config
    }

    /// Learning rate the next update will use.
    pub fn current_lr(&self) -> Result<f64, AutodiffError> {
        cosine_lr(self.step, self.total_steps, self.config.base_lr, self.config.min_lr)
    }

    /// Applies one update to every parameter. All gradients are checked
    /// before any parameter is touched.
    pub fn update<'a>(
        &mut self,
        params: impl IntoIterator<Item = (&'a str, &'a mut Tensor)>,
        grads: &BTreeMap<String, Tensor>,
    ) -> Result<(), AutodiffError> {
        let params: Vec<(&str, &mut Tensor)> = params.into_iter().collect();
        for (name, p) in &params {
            let g = grads
                .get(*name)
                .ok_or_else(|| AutodiffError::MissingGradient(name.to_string()))?;
            if g.shape() != p.shape() {
                return Err(AutodiffError::ShapeMismatch(format!(
                    "gradient for {name} has shape {:?}, parameter {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
        }
        let lr = self.current_lr()?;
        let cfg = &self.config;
        let t = (self.step + 1) as i32;
        let bias1 = 1.0 - cfg.beta1.powi(t);
        let bias2 = 1.0 - cfg.beta2.powi(t);
        for (name, p) in params {
            let g = &grads[name];
            let m = self
                .first_moment
                .entry(name.to_string())
                .or_insert_with(|| vec![0.0; p.numel()]);
            let v = self
                .second_moment
                .entry(name.to_string())
                .or_insert_with(|| vec![0.0; p.numel()]);
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
                *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
                let m_hat = *mi / bias1;
                let v_hat = *vi / bias2;
                *w -= lr * (m_hat / (v_hat.sqrt() + cfg.eps) + cfg.weight_decay * *w);
            }
        }
        self.step += 1;
        Ok(())
    }
}
