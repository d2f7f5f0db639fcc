use std::f64::consts::PI;

use super::params::ParamStore;
use crate::error::{Error, Result};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Optimization hyperparameters shared by every training stage.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub dropout: f64,
    /// λ in the KGE regularizer.
    pub reg_weight: f64,
    pub max_grad_norm: f64,
    pub warmup_steps: usize,
    pub patience: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            learning_rate: 0.001,
            batch_size: 128,
            epochs: 100,
            dropout: 0.2,
            reg_weight: 0.01,
            max_grad_norm: 1.0,
            warmup_steps: 200,
            patience: 3,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate must be > 0"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("dropout must lie in [0, 1)"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be >= 1"));
        }
        if !(self.max_grad_norm > 0.0) {
            return Err(Error::config("max_grad_norm must be > 0"));
        }
        if self.reg_weight < 0.0 {
            return Err(Error::config("reg_weight must be >= 0"));
        }
        Ok(())
    }
}

/// Linear warmup from 0 to the base rate, then cosine decay to 0 at
/// `total_steps`. Steps past the end stay at 0.
pub fn schedule_lr(step: usize, config: &OptimConfig, total_steps: usize) -> Result<f64> {
    let warmup = config.warmup_steps;
    if total_steps <= warmup {
        return Err(Error::config(format!(
            "total steps ({total_steps}) must exceed warmup steps ({warmup})"
        )));
    }
    let base = config.learning_rate;
    if step < warmup {
        return Ok(base * step as f64 / warmup as f64);
    }
    if step >= total_steps {
        return Ok(0.0);
    }
    let progress = (step - warmup) as f64 / (total_steps - warmup) as f64;
    Ok(0.5 * base * (1.0 + (PI * progress).cos()))
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the factor applied (1.0 when untouched).
pub fn clip_gradients(params: &mut ParamStore, max_norm: f64) -> f64 {
    let total: f64 = params.grads().map(|(_, g)| g.sum_squares()).sum();
    let norm = total.sqrt();
    if norm <= max_norm || norm == 0.0 {
        return 1.0;
    }
    let factor = max_norm / norm;
    for g in params.grads_mut() {
        g.scale_in_place(factor);
    }
    factor
}

/// One bias-corrected Adam update at learning rate `lr`.
pub fn adam_step(params: &mut ParamStore, lr: f64) -> Result<()> {
    let names: Vec<String> = params.names().map(str::to_string).collect();
    for name in &names {
        if params.grad(name).is_none() {
            return Err(Error::contract(format!("no gradient for parameter `{name}`")));
        }
        params.moments_mut(name);
    }
    let t = params.bump_step() as i32;
    let bc1 = 1.0 - ADAM_BETA1.powi(t);
    let bc2 = 1.0 - ADAM_BETA2.powi(t);
    let (values, grads, first, second) = params.split_for_update();
    for (name, value) in values.iter_mut() {
        let g = &grads[name];
        let m = first.get_mut(name).expect("moment allocated above");
        let v = second.get_mut(name).expect("moment allocated above");
        for (((w, &gi), mi), vi) in value
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *mi = ADAM_BETA1 * *mi + (1.0 - ADAM_BETA1) * gi;
            *vi = ADAM_BETA2 * *vi + (1.0 - ADAM_BETA2) * gi * gi;
            let m_hat = *mi / bc1;
            let v_hat = *vi / bc2;
            *w -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

/// Clip, schedule and apply Adam in one call; returns the rate used.
pub fn optimizer_step(
    params: &mut ParamStore,
    config: &OptimConfig,
    total_steps: usize,
) -> Result<f64> {
    clip_gradients(params, config.max_grad_norm);
    let lr = schedule_lr(params.step() as usize, config, total_steps)?;
    adam_step(params, lr)?;
    Ok(lr)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    fn store_with_grad(value: Vec<f64>, grad: Vec<f64>) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::row_vector(value));
        s.zero_grad();
        s.accumulate_grad("w", &Tensor::row_vector(grad)).unwrap();
        s
    }

    #[test]
    fn schedule_endpoints() {
        let cfg = OptimConfig::default();
        let total = 1200;
        assert_eq!(schedule_lr(200, &cfg, total).unwrap(), 0.001);
        assert_eq!(schedule_lr(total, &cfg, total).unwrap(), 0.0);
        let mid = schedule_lr((200 + total) / 2, &cfg, total).unwrap();
        assert!((mid - 0.0005).abs() < 1e-15);
        assert_eq!(schedule_lr(0, &cfg, total).unwrap(), 0.0);
        assert_eq!(schedule_lr(100, &cfg, total).unwrap(), 0.0005);
    }

    #[test]
    fn schedule_rejects_short_runs() {
        let cfg = OptimConfig::default();
        assert!(matches!(schedule_lr(0, &cfg, 200), Err(Error::Config(_))));
    }

    #[test]
    fn clip_factors() {
        let mut s = store_with_grad(vec![0.0, 0.0], vec![2.0 * 0.6, 2.0 * 0.8]);
        assert!((clip_gradients(&mut s, 1.0) - 0.5).abs() < 1e-15);

        let mut s = store_with_grad(vec![0.0, 0.0], vec![0.3, 0.0]);
        assert_eq!(clip_gradients(&mut s, 1.0), 1.0);
        assert_eq!(s.grad("w").unwrap().data(), &[0.3, 0.0]);

        let mut s = store_with_grad(vec![0.0, 0.0], vec![3.0, 4.0]);
        clip_gradients(&mut s, 1.0);
        let g = s.grad("w").unwrap().data();
        assert!((g[0] - 0.6).abs() < 1e-15 && (g[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut s = store_with_grad(vec![1.0, 1.0, 1.0], vec![0.5, -3.0, 1e-3]);
        adam_step(&mut s, 0.01).unwrap();
        for (w, sign) in s.get("w").unwrap().data().iter().zip([-1.0, 1.0, -1.0]) {
            let delta = w - 1.0;
            assert!((delta - sign * 0.01).abs() < 1e-6, "delta {delta}");
        }
    }

    #[test]
    fn adam_zero_gradient_is_identity() {
        let mut s = store_with_grad(vec![0.25, -4.0], vec![0.0, 0.0]);
        adam_step(&mut s, 0.01).unwrap();
        assert_eq!(s.get("w").unwrap().data(), &[0.25, -4.0]);
    }

    #[test]
    fn adam_requires_gradients() {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::zeros(1, 2));
        assert!(matches!(adam_step(&mut s, 0.1), Err(Error::Contract(_))));
    }

    #[test]
    fn adam_is_deterministic() {
        let run = || {
            let mut s = store_with_grad(vec![0.1, 0.2], vec![0.3, -0.7]);
            for _ in 0..5 {
                adam_step(&mut s, 0.01).unwrap();
            }
            s.get("w").unwrap().data().iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }
}
