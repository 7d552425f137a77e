use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    /// sequences per step
    pub batch_size: usize,
    /// frames per training crop
    pub window: usize,
    /// noise draws per predicted frame (diffusion losses only)
    pub draws_per_frame: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// global gradient-norm clip; 0 disables
    pub grad_clip: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            warmup_steps: 100,
            total_steps: 2000,
            batch_size: 4,
            window: 128,
            draws_per_frame: 4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            grad_clip: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(invalid("learning rate must be positive"));
        }
        if self.total_steps == 0 || self.batch_size == 0 || self.window < 2 {
            return Err(invalid("total steps and batch size must be positive, window ≥ 2"));
        }
        if self.warmup_steps >= self.total_steps {
            return Err(invalid("warmup steps must be fewer than total steps"));
        }
        Ok(())
    }

    /// Linear warmup factor: 0 at step 0, 1 from `warmup_steps` on.
    pub fn warmup_factor(&self, step: usize) -> f64 {
        if self.warmup_steps == 0 || step >= self.warmup_steps {
            1.0
        } else {
            step as f64 / self.warmup_steps as f64
        }
    }

    /// Half-cosine from 1 at the end of warmup to 0 at the final step.
    pub fn cosine_factor(&self, step: usize) -> f64 {
        let last = self.total_steps.saturating_sub(1);
        if step <= self.warmup_steps || last <= self.warmup_steps {
            return 1.0;
        }
        let frac = ((step - self.warmup_steps) as f64 / (last - self.warmup_steps) as f64).min(1.0);
        0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
    }

    pub fn learning_rate(&self, step: usize) -> f64 {
        self.lr * self.warmup_factor(step) * self.cosine_factor(step)
    }
}

/// Adam first/second moment estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }
}

/// One Adam update with the warmup + cosine learning rate. Returns the
/// learning rate that was applied.
pub fn train_step(
    params: &mut [f64],
    state: &mut AdamState,
    grads: &[f64],
    step: usize,
    cfg: &TrainConfig,
) -> Result<f64> {
    if step >= cfg.total_steps {
        return Err(invalid(format!(
            "step {step} is past the configured {} total steps",
            cfg.total_steps
        )));
    }
    if params.len() != grads.len() || state.m.len() != params.len() {
        return Err(invalid("parameter, gradient and optimizer sizes differ"));
    }
    let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
    if !norm.is_finite() {
        return Err(Error::TrainingDiverged {
            step,
            reason: "non-finite gradient".into(),
        });
    }
    let clip = if cfg.grad_clip > 0.0 && norm > cfg.grad_clip {
        cfg.grad_clip / norm
    } else {
        1.0
    };
    let lr = cfg.learning_rate(step);
    let t = (step + 1) as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for i in 0..params.len() {
        let g = grads[i] * clip;
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        let mhat = state.m[i] / bc1;
        let vhat = state.v[i] / bc2;
        params[i] -= lr * mhat / (vhat.sqrt() + cfg.eps);
    }
    Ok(lr)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> TrainConfig {
        TrainConfig {
            lr: 1e-2,
            warmup_steps: 10,
            total_steps: 100,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn schedule_endpoints() {
        let c = cfg();
        assert_eq!(c.learning_rate(0), 0.0);
        assert!((c.learning_rate(5) - 0.5e-2).abs() < 1e-15);
        assert!((c.learning_rate(10) - 1e-2).abs() < 1e-15);
        assert!(c.cosine_factor(99) < 1e-12);
        assert!(c.learning_rate(99).abs() < 1e-12);
    }

    #[test]
    fn step_zero_leaves_params_unchanged() {
        let c = cfg();
        let mut p = vec![1.0, -2.0];
        let mut s = AdamState::new(2);
        train_step(&mut p, &mut s, &[0.3, 0.1], 0, &c).unwrap();
        assert_eq!(p, vec![1.0, -2.0]);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let c = TrainConfig {
            lr: 0.1,
            warmup_steps: 5,
            total_steps: 400,
            grad_clip: 0.0,
            ..TrainConfig::default()
        };
        let mut p = vec![3.0, -4.0];
        let mut s = AdamState::new(2);
        for step in 0..400 {
            let g = vec![2.0 * p[0], 2.0 * p[1]];
            train_step(&mut p, &mut s, &g, step, &c).unwrap();
        }
        assert!(p[0].abs() < 1e-2 && p[1].abs() < 1e-2, "{p:?}");
    }

    #[test]
    fn rejects_non_finite_and_out_of_range() {
        let c = cfg();
        let mut p = vec![0.0];
        let mut s = AdamState::new(1);
        assert!(matches!(
            train_step(&mut p, &mut s, &[f64::NAN], 3, &c),
            Err(Error::TrainingDiverged { .. })
        ));
        assert!(train_step(&mut p, &mut s, &[0.0], 100, &c).is_err());
        let bad = TrainConfig {
            warmup_steps: 100,
            ..c
        };
        assert!(bad.validate().is_err());
    }
}
