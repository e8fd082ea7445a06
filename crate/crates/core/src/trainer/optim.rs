//! AdamW with decoupled weight decay, and the cosine learning-rate schedule.

use std::collections::BTreeMap;

use crate::autodiff::Tensor;
use crate::error::{PmoeError, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

#[derive(Debug, Clone)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
    steps: u64,
}

/// First and second moments per named parameter.
#[derive(Debug, Clone, Default)]
pub struct OptimState {
    moments: BTreeMap<String, Moments>,
}

impl OptimState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn steps(&self, name: &str) -> u64 {
        self.moments.get(name).map_or(0, |m| m.steps)
    }

    pub fn first_moment(&self, name: &str) -> Option<&[f64]> {
        self.moments.get(name).map(|m| m.m.as_slice())
    }
}

/// One AdamW update of `param` named `name` with gradient `grad`.
pub fn adamw_step(
    name: &str,
    param: &mut Tensor,
    grad: &[f64],
    state: &mut OptimState,
    cfg: &AdamWConfig,
    lr: f64,
) -> Result<()> {
    if grad.len() != param.len() {
        return Err(PmoeError::Contract(format!(
            "gradient for `{name}` has {} values, parameter has {}",
            grad.len(),
            param.len()
        )));
    }
    let mom = state.moments.entry(name.to_string()).or_insert_with(|| Moments {
        m: vec![0.0; grad.len()],
        v: vec![0.0; grad.len()],
        steps: 0,
    });
    if mom.m.len() != grad.len() {
        return Err(PmoeError::Contract(format!(
            "moment shape for `{name}` does not match parameter ({} vs {})",
            mom.m.len(),
            grad.len()
        )));
    }
    mom.steps += 1;
    let bc1 = 1.0 - cfg.beta1.powi(mom.steps as i32);
    let bc2 = 1.0 - cfg.beta2.powi(mom.steps as i32);
    for ((p, &g), (m, v)) in param
        .data_mut()
        .iter_mut()
        .zip(grad)
        .zip(mom.m.iter_mut().zip(mom.v.iter_mut()))
    {
        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p -= lr * (m_hat / (v_hat.sqrt() + cfg.eps) + cfg.weight_decay * *p);
    }
    Ok(())
}

/// `base_lr · (1 + cos(π·step/total)) / 2`, clamped at zero.
pub fn cosine_lr(step: usize, total_steps: usize, base_lr: f64) -> f64 {
    if total_steps == 0 {
        return base_lr;
    }
    let frac = step.min(total_steps) as f64 / total_steps as f64;
    (base_lr * (1.0 + (std::f64::consts::PI * frac).cos()) / 2.0).max(0.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_only_decays() {
        let cfg = AdamWConfig { weight_decay: 0.1, ..Default::default() };
        let mut p = Tensor::full(&[3], 2.0);
        let mut st = OptimState::new();
        adamw_step("w", &mut p, &[0.0; 3], &mut st, &cfg, 0.01).unwrap();
        for &v in p.data() {
            assert!((v - 2.0 * (1.0 - 0.01 * 0.1)).abs() < 1e-15);
        }
    }

    #[test]
    fn constant_gradient_steps_approach_lr() {
        let cfg = AdamWConfig::default();
        let mut p = Tensor::zeros(&[1]);
        let mut st = OptimState::new();
        let mut prev = 0.0;
        let mut last_step = 0.0;
        for _ in 0..2000 {
            adamw_step("w", &mut p, &[0.37], &mut st, &cfg, 1e-3).unwrap();
            last_step = prev - p.data()[0];
            prev = p.data()[0];
        }
        assert!((last_step - 1e-3).abs() < 1e-9, "{last_step}");
    }

    #[test]
    fn first_step_matches_hand_formula() {
        let cfg = AdamWConfig { weight_decay: 0.01, ..Default::default() };
        let mut p = Tensor::new(vec![2], vec![0.5, -1.0]).unwrap();
        let g = [0.2, -0.4];
        let mut st = OptimState::new();
        adamw_step("w", &mut p, &g, &mut st, &cfg, 0.1).unwrap();
        for (i, &theta) in [0.5f64, -1.0].iter().enumerate() {
            let m = 0.1 * g[i];
            let v = 0.001 * g[i] * g[i];
            let m_hat = m / (1.0 - 0.9);
            let v_hat = v / (1.0 - 0.999);
            let expected = theta - 0.1 * (m_hat / (v_hat.sqrt() + 1e-8) + 0.01 * theta);
            assert!((p.data()[i] - expected).abs() < 1e-15);
        }
        assert_eq!(st.steps("w"), 1);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut p = Tensor::zeros(&[2]);
        let mut st = OptimState::new();
        let cfg = AdamWConfig::default();
        assert!(adamw_step("w", &mut p, &[1.0], &mut st, &cfg, 0.1).is_err());
        adamw_step("w", &mut p, &[1.0, 1.0], &mut st, &cfg, 0.1).unwrap();
        let mut bigger = Tensor::zeros(&[3]);
        assert!(adamw_step("w", &mut bigger, &[1.0; 3], &mut st, &cfg, 0.1).is_err());
    }

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(0, 100, 3e-4), 3e-4);
        assert_eq!(cosine_lr(100, 100, 3e-4), 0.0);
        assert!((cosine_lr(50, 100, 3e-4) - 1.5e-4).abs() < 1e-18);
    }
}
