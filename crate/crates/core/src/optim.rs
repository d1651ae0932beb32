//! Decoupled-weight-decay adaptive-moment optimizer and the four-phase
//! learning-rate schedule (linear warmup, plateau, linear decay, floor).

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0
            && self.weight_decay.is_finite();
        if !ok {
            return Err(CoreError::Config(format!(
                "invalid optimizer settings: beta1={} beta2={} eps={} weight_decay={}",
                self.beta1, self.beta2, self.eps, self.weight_decay
            )));
        }
        Ok(())
    }
}

pub struct AdamW {
    config: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamW {
    pub fn new(param_count: usize, config: AdamConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            m: vec![0.0; param_count],
            v: vec![0.0; param_count],
            t: 0,
        })
    }

    pub fn updates(&self) -> u64 {
        self.t
    }

    /// One update. Weight decay is decoupled: it scales parameters directly
    /// rather than entering the moment estimates.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(CoreError::ShapeMismatch {
                expected: format!("{} parameters", self.m.len()),
                got: format!("{} params / {} grads", params.len(), grads.len()),
                context: "optimizer step".into(),
            });
        }
        if !lr.is_finite() || lr < 0.0 {
            return Err(CoreError::Numeric(format!("invalid learning rate {lr}")));
        }
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(CoreError::NonFinite {
                what: "gradient passed to optimizer".into(),
                step: Some(self.t as usize),
            });
        }
        self.t += 1;
        let b1 = self.config.beta1;
        let b2 = self.config.beta2;
        let bias1 = 1.0 - b1.powi(self.t as i32);
        let bias2 = 1.0 - b2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g;
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g;
            let m_hat = self.m[i] / bias1;
            let v_hat = self.v[i] / bias2;
            params[i] -= lr * (m_hat / (v_hat.sqrt() + self.config.eps)
                + self.config.weight_decay * params[i]);
        }
        Ok(())
    }
}

/// Piecewise-linear schedule over optimizer updates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub warmup_steps: usize,
    pub plateau_steps: usize,
    pub decay_steps: usize,
    pub peak_lr: f64,
    pub floor_lr: f64,
}

impl LrSchedule {
    pub fn validate(&self) -> Result<()> {
        let ok = self.peak_lr > 0.0
            && self.peak_lr.is_finite()
            && self.floor_lr >= 0.0
            && self.floor_lr <= self.peak_lr;
        if !ok {
            return Err(CoreError::Config(format!(
                "invalid schedule: peak_lr={} floor_lr={}",
                self.peak_lr, self.floor_lr
            )));
        }
        Ok(())
    }

    /// Learning rate for update number `step` (0-based). Warmup ramps from
    /// peak/warmup_steps up to peak so the first update is never zero.
    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            // Ratio first so the final warmup step lands on peak_lr exactly.
            return self.peak_lr * ((step + 1) as f64 / self.warmup_steps as f64);
        }
        let step = step - self.warmup_steps;
        if step < self.plateau_steps {
            return self.peak_lr;
        }
        let step = step - self.plateau_steps;
        if step < self.decay_steps {
            let frac = step as f64 / self.decay_steps as f64;
            return self.peak_lr + (self.floor_lr - self.peak_lr) * frac;
        }
        self.floor_lr
    }
}
