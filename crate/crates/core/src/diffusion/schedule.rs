use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Linear β schedule with cumulative products.
///
/// Index `t` runs over `1..=T`; `alpha_bar(0)` is defined as 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn linear(steps: usize, beta_min: f64, beta_max: f64) -> Result<Self> {
        if steps < 2 {
            return Err(Error::InvalidArgument(format!("schedule needs T >= 2, got {steps}")));
        }
        if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "beta range [{beta_min}, {beta_max}] must satisfy 0 < min <= max < 1"
            )));
        }
        let beta: Vec<f64> = (0..steps)
            .map(|i| beta_min + (beta_max - beta_min) * i as f64 / (steps - 1) as f64)
            .collect();
        Ok(Self::from_betas(beta))
    }

    /// Builds from explicit β_1..β_T (caller guarantees `0 < β < 1`).
    pub fn from_betas(beta: Vec<f64>) -> Self {
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(alpha.len());
        let mut acc = 1.0;
        for &a in &alpha {
            acc *= a;
            alpha_bar.push(acc);
        }
        Self { beta, alpha, alpha_bar }
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    /// ᾱ_t, with ᾱ_0 = 1.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    /// ᾱ used as the target of a reverse step ending at `t_prev`.
    ///
    /// A step that ends at `t_prev = 0` targets ᾱ_1 rather than 1, so the
    /// final transition keeps a nonzero variance (the usual
    /// `set_alpha_to_one = false` convention for DDIM samplers).
    pub fn alpha_bar_target(&self, t_prev: usize) -> f64 {
        self.alpha_bar(t_prev.max(1))
    }

    /// `K + 1` evenly spaced timesteps from `T` down to 0.
    pub fn inference_timesteps(&self, k: usize) -> Result<Vec<usize>> {
        let t = self.steps();
        if k == 0 || k > t {
            return Err(Error::InvalidArgument(format!(
                "inference steps {k} must lie in 1..={t}"
            )));
        }
        Ok((0..=k)
            .rev()
            .map(|i| ((i * t) as f64 / k as f64).round() as usize)
            .collect())
    }
}

/// Closed-form forward marginal `sqrt(ᾱ_t) x0 + sqrt(1 - ᾱ_t) ε`.
pub fn forward_noise(x0: &[f64], t: usize, eps: &[f64], schedule: &NoiseSchedule) -> Result<Vec<f64>> {
    if t > schedule.steps() {
        return Err(Error::InvalidArgument(format!(
            "timestep {t} outside 0..={}",
            schedule.steps()
        )));
    }
    if x0.len() != eps.len() {
        return Err(Error::shape("forward_noise", &[x0.len()], &[eps.len()]));
    }
    let ab = schedule.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(x0.iter().zip(eps).map(|(x, e)| a * x + b * e).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn first_cumulative_product_is_one_minus_beta() {
        let s = NoiseSchedule::linear(100, 1e-4, 0.02).unwrap();
        assert_eq!(s.alpha_bar(1), 1.0 - s.beta(1));
        assert_eq!(s.alpha_bar(0), 1.0);
    }

    #[test]
    fn alpha_bar_strictly_decreasing() {
        let s = NoiseSchedule::linear(100, 1e-4, 0.02).unwrap();
        for t in 1..100 {
            assert!(s.alpha_bar(t + 1) < s.alpha_bar(t));
        }
        assert!(s.beta(1) > 0.0 && s.beta(100) < 1.0);
    }

    #[test]
    fn two_step_product() {
        let s = NoiseSchedule::linear(2, 0.1, 0.2).unwrap();
        assert!((s.alpha_bar(2) - 0.72).abs() < 1e-15);
    }

    #[test]
    fn bounds_are_validated() {
        assert!(NoiseSchedule::linear(1, 0.1, 0.2).is_err());
        assert!(NoiseSchedule::linear(10, 0.0, 0.2).is_err());
        assert!(NoiseSchedule::linear(10, 0.3, 0.2).is_err());
        assert!(NoiseSchedule::linear(10, 0.1, 1.0).is_err());
    }

    #[test]
    fn inference_schedule_shape() {
        let s = NoiseSchedule::linear(100, 1e-4, 0.02).unwrap();
        let ts = s.inference_timesteps(50).unwrap();
        assert_eq!(ts.len(), 51);
        assert_eq!((ts[0], ts[1], ts[49], ts[50]), (100, 98, 2, 0));
        assert_eq!(s.inference_timesteps(100).unwrap(), (0..=100).rev().collect::<Vec<_>>());
        assert!(s.inference_timesteps(101).is_err());
    }

    #[test]
    fn forward_noise_endpoints() {
        let s = NoiseSchedule::from_betas(vec![0.75, 0.5]);
        assert!((s.alpha_bar(1) - 0.25).abs() < 1e-15);
        assert_eq!(forward_noise(&[1.0], 1, &[0.0], &s).unwrap(), vec![0.5]);
        assert_eq!(
            forward_noise(&[1.3, -2.0], 0, &[0.7, 0.1], &s).unwrap(),
            vec![1.3, -2.0]
        );
        assert!(forward_noise(&[1.0], 3, &[0.0], &s).is_err());
    }

    #[test]
    fn forward_marginal_moments() {
        let s = NoiseSchedule::linear(100, 1e-4, 0.02).unwrap();
        let t = 40;
        let x0 = 0.8;
        let n = 100_000;
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let xs: Vec<f64> = (0..n)
            .map(|_| {
                let e: f64 = StandardNormal.sample(&mut rng);
                forward_noise(&[x0], t, &[e], &s).unwrap()[0]
            })
            .collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let ab = s.alpha_bar(t);
        let true_var = 1.0 - ab;
        let se_mean = (true_var / n as f64).sqrt();
        let se_var = true_var * (2.0 / (n - 1) as f64).sqrt();
        assert!((mean - ab.sqrt() * x0).abs() < 3.0 * se_mean);
        assert!((var - true_var).abs() < 3.0 * se_var);
    }
}
