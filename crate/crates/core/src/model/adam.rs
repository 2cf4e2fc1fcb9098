use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// First and second moment estimates plus the number of completed steps.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }
}

/// One bias-corrected Adam update, in place.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, cfg: &AdamConfig) {
    assert_eq!(params.len(), grads.len(), "parameter/gradient length");
    assert_eq!(params.len(), state.m.len(), "parameter/state length");
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (((p, &g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
    }
}

/// Rescales `grads` so its L2 norm is at most `max_norm`; returns the norm
/// before clipping.
pub fn clip_global_norm(grads: &mut [f64], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = max_norm / norm;
        grads.iter_mut().for_each(|g| *g *= s);
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut p = vec![1.0, -2.0, 3.5];
        let before = p.clone();
        let mut s = AdamState::new(3);
        for _ in 0..5 {
            adam_step(&mut p, &[0.0; 3], &mut s, &AdamConfig::default());
        }
        assert_eq!(p, before);
        assert_eq!(s.step, 5);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let cfg = AdamConfig::default();
        let g = [3.0, -0.02, 1e3, -7.0];
        let mut p = vec![0.0; 4];
        let mut s = AdamState::new(4);
        adam_step(&mut p, &g, &mut s, &cfg);
        for (x, gi) in p.iter().zip(g) {
            // m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps).
            let expect = -cfg.learning_rate * gi / (gi.abs() + cfg.epsilon);
            assert!((x - expect).abs() < 1e-15);
            assert!((x.abs() - cfg.learning_rate).abs() < 1e-9);
        }
    }

    #[test]
    fn second_step_matches_closed_form() {
        let cfg = AdamConfig {
            learning_rate: 0.01,
            ..AdamConfig::default()
        };
        let (g1, g2) = (0.5, -1.5);
        let mut p = vec![0.0];
        let mut s = AdamState::new(1);
        adam_step(&mut p, &[g1], &mut s, &cfg);
        adam_step(&mut p, &[g2], &mut s, &cfg);
        let m = 0.9 * 0.1 * g1 + 0.1 * g2;
        let v = 0.999 * 0.001 * g1 * g1 + 0.001 * g2 * g2;
        let step2 = 0.01 * (m / (1.0 - 0.81)) / ((v / (1.0 - 0.999f64.powi(2))).sqrt() + 1e-8);
        let expect = -0.01 * g1 / (g1.abs() + 1e-8) - step2;
        assert!((p[0] - expect).abs() < 1e-14);
    }

    #[test]
    fn clipping() {
        let mut g = vec![3.0, 4.0];
        assert_eq!(clip_global_norm(&mut g, 10.0), 5.0);
        assert_eq!(g, vec![3.0, 4.0]);
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((g[0] - 0.6).abs() < 1e-15 && (g[1] - 0.8).abs() < 1e-15);
    }
}
