use crate::error::{argument, Result};

/// Adam hyper-parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Learning rate halves after every this many steps.
    pub lr_halve_every: u64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 2e-4, beta1: 0.9, beta2: 0.999, epsilon: 1e-8, lr_halve_every: 50_000 }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    /// Steps taken so far.
    pub t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }
}

impl AdamConfig {
    /// Learning rate in force for the step after `steps_taken` steps.
    pub fn lr_at(&self, steps_taken: u64) -> f64 {
        let halvings = steps_taken / self.lr_halve_every.max(1);
        self.lr * 0.5f64.powi(halvings.min(i32::MAX as u64) as i32)
    }
}

/// One bias-corrected Adam update in place.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
    if params.len() != grads.len() || state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(argument(format!(
            "adam length mismatch: params {}, grads {}, state {}/{}",
            params.len(),
            grads.len(),
            state.m.len(),
            state.v.len()
        )));
    }
    let lr = cfg.lr_at(state.t);
    state.t += 1;
    let bc1 = 1.0 - cfg.beta1.powi(state.t.min(i32::MAX as u64) as i32);
    let bc2 = 1.0 - cfg.beta2.powi(state.t.min(i32::MAX as u64) as i32);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + cfg.epsilon);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_keeps_params() {
        let mut p = vec![1.0, -2.0, 3.5];
        let mut s = AdamState::new(3);
        adam_step(&mut p, &[0.0; 3], &mut s, &AdamConfig::default()).unwrap();
        assert_eq!(p, vec![1.0, -2.0, 3.5]);
        assert_eq!(s.t, 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let cfg = AdamConfig::default();
        for g in [1.0, 1e-3, 250.0] {
            let mut p = vec![0.0];
            adam_step(&mut p, &[g], &mut AdamState::new(1), &cfg).unwrap();
            // |delta| = lr * |g| / (|g| + eps)
            let expect = cfg.lr * g / (g + cfg.epsilon);
            assert!((p[0] + expect).abs() < 1e-18, "{g}: {}", p[0]);
            assert!((p[0].abs() - cfg.lr).abs() < cfg.lr * 1e-4);
        }
    }

    #[test]
    fn fresh_step_descends() {
        let g = [0.3, -2.0, 1e-6, -1e-4];
        let mut p = vec![0.0; 4];
        adam_step(&mut p, &g, &mut AdamState::new(4), &AdamConfig::default()).unwrap();
        for (d, g) in p.iter().zip(g) {
            assert_eq!(d.signum(), -g.signum());
        }
    }

    #[test]
    fn schedule_halves() {
        let cfg = AdamConfig { lr: 1.0, lr_halve_every: 10, ..Default::default() };
        assert_eq!(cfg.lr_at(0), 1.0);
        assert_eq!(cfg.lr_at(9), 1.0);
        assert_eq!(cfg.lr_at(10), 0.5);
        assert_eq!(cfg.lr_at(25), 0.25);
    }

    #[test]
    fn length_mismatch() {
        let mut p = vec![0.0; 2];
        assert!(adam_step(&mut p, &[0.0], &mut AdamState::new(2), &AdamConfig::default()).is_err());
    }
}
