//! Bias-corrected Adam with decoupled weight decay.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// First/second moment accumulators and the step counter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }
}

pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, cfg: &AdamConfig) {
    assert_eq!(params.len(), grads.len(), "parameter/gradient length");
    assert_eq!(params.len(), state.m.len(), "parameter/state length");
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (((w, &g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *w -= cfg.learning_rate * (m_hat / (v_hat.sqrt() + cfg.epsilon) + cfg.weight_decay * *w);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_is_a_no_op() {
        let cfg = AdamConfig {
            weight_decay: 0.0,
            ..AdamConfig::default()
        };
        let mut params = vec![0.3, -1.2];
        let mut state = AdamState::new(2);
        adam_step(&mut params, &[0.0, 0.0], &mut state, &cfg);
        assert_eq!(params, vec![0.3, -1.2]);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let cfg = AdamConfig {
            weight_decay: 0.0,
            ..AdamConfig::default()
        };
        let mut params = vec![0.0, 0.0, 0.0];
        let mut state = AdamState::new(3);
        adam_step(&mut params, &[5.0, -0.01, 300.0], &mut state, &cfg);
        for (p, s) in params.iter().zip([-1.0, 1.0, -1.0]) {
            assert!((p - s * cfg.learning_rate).abs() < 1e-9, "{p}");
        }
    }

    #[test]
    fn deterministic() {
        let cfg = AdamConfig::default();
        let run = || {
            let mut params = vec![1.0, 2.0];
            let mut state = AdamState::new(2);
            state.m = vec![0.1, 0.2];
            state.v = vec![0.01, 0.04];
            state.step = 3;
            adam_step(&mut params, &[0.5, -0.5], &mut state, &cfg);
            (params, state)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn decay_is_decoupled() {
        let cfg = AdamConfig {
            learning_rate: 0.1,
            weight_decay: 0.5,
            ..AdamConfig::default()
        };
        let mut params = vec![2.0];
        let mut state = AdamState::new(1);
        adam_step(&mut params, &[0.0], &mut state, &cfg);
        assert!((params[0] - (2.0 - 0.1 * 0.5 * 2.0)).abs() < 1e-12);
    }
}
