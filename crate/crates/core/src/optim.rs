//! AdamW with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-2,
        }
    }
}

/// First/second moment estimates and the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamWState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamWState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }
}

/// One AdamW update in place.
///
/// The decay `θ ← θ − lr·wd·θ` is applied to the pre-update parameters and
/// is independent of the moment estimates.
pub fn adamw_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamWState,
    cfg: &AdamWConfig,
    lr: f64,
    wd: f64,
) -> Result<()> {
    if params.len() != grads.len() || state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(Error::shape(
            "adamw_step",
            &[params.len(), state.m.len(), state.v.len()],
            &[grads.len()],
        ));
    }
    if !(lr >= 0.0) {
        return Err(Error::InvalidArgument(format!("learning rate {lr}")));
    }
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (((p, &g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p -= lr * wd * *p;
        *p -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
    Ok(())
}

/// Rescales `grads` so that their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [f64], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().for_each(|g| *g *= s);
    }
    norm
}

/// Clips `grads` to `max_norm` (when positive) and applies one AdamW update
/// with the configured weight decay. Returns the pre-clip gradient norm.
pub fn clipped_step(
    params: &mut [f64],
    mut grads: Vec<f64>,
    state: &mut AdamWState,
    cfg: &AdamWConfig,
    lr: f64,
    max_norm: f64,
) -> Result<f64> {
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("gradient".into()));
    }
    let norm = clip_grad_norm(&mut grads, max_norm);
    adamw_step(params, &grads, state, cfg, lr, cfg.weight_decay)?;
    Ok(norm)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_without_decay_is_identity() {
        let mut p = vec![1.0, -2.0, 3.5];
        let before = p.clone();
        let mut s = AdamWState::new(3);
        adamw_step(&mut p, &[0.0; 3], &mut s, &AdamWConfig::default(), 1e-3, 0.0).unwrap();
        assert_eq!(p, before);
        assert_eq!(s.t, 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // m_hat = g, v_hat = g^2 after bias correction.
        let mut p = vec![1.0];
        let mut s = AdamWState::new(1);
        adamw_step(&mut p, &[1.0], &mut s, &AdamWConfig::default(), 1e-3, 0.0).unwrap();
        let expected = 1.0 - 1e-3 * 1.0 / (1.0 + 1e-8);
        assert!((p[0] - expected).abs() < 1e-15, "{}", p[0]);
        assert!((p[0] - 0.999).abs() < 1e-10);
    }

    #[test]
    fn decoupled_decay_with_zero_gradient() {
        let mut p = vec![2.0];
        let mut s = AdamWState::new(1);
        adamw_step(&mut p, &[0.0], &mut s, &AdamWConfig::default(), 0.1, 0.01).unwrap();
        assert!((p[0] - 1.998).abs() < 1e-15);
    }

    #[test]
    fn without_decay_matches_plain_adam() {
        let cfg = AdamWConfig::default();
        let grads = [[0.3, -1.2], [0.1, 0.4], [-0.5, 2.0]];
        let mut p = vec![0.5, -0.25];
        let mut s = AdamWState::new(2);
        let (mut m, mut v, mut q) = ([0.0f64; 2], [0.0f64; 2], [0.5f64, -0.25]);
        for (k, g) in grads.iter().enumerate() {
            adamw_step(&mut p, g, &mut s, &cfg, 0.01, 0.0).unwrap();
            let t = (k + 1) as i32;
            for i in 0..2 {
                m[i] = 0.9 * m[i] + 0.1 * g[i];
                v[i] = 0.999 * v[i] + 0.001 * g[i] * g[i];
                let mh = m[i] / (1.0 - 0.9f64.powi(t));
                let vh = v[i] / (1.0 - 0.999f64.powi(t));
                q[i] -= 0.01 * mh / (vh.sqrt() + 1e-8);
            }
        }
        assert_eq!(p, q.to_vec());
        assert!(s.v.iter().all(|&x| x >= 0.0));
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut p = vec![0.0; 2];
        let mut s = AdamWState::new(2);
        let err = adamw_step(&mut p, &[0.0; 3], &mut s, &AdamWConfig::default(), 1e-3, 0.0);
        assert!(matches!(err, Err(Error::Shape { .. })));
    }

    #[test]
    fn grad_clipping_caps_the_norm() {
        let mut g = vec![3.0, 4.0];
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        assert!((g[0] - 0.6).abs() < 1e-15 && (g[1] - 0.8).abs() < 1e-15);
        let mut small = vec![0.1];
        clip_grad_norm(&mut small, 1.0);
        assert_eq!(small, vec![0.1]);
    }
}
