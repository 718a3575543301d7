use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Variance schedule shared by the DDPM and per-token diffusion heads.
/// Tables are indexed by step t ∈ [1, T] at position t − 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub steps: usize,
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub alpha_bar: Vec<f64>,
    /// β̃_t = (1 − ᾱ_{t−1}) / (1 − ᾱ_t) · β_t, with ᾱ_0 = 1.
    pub posterior_var: Vec<f64>,
}

impl NoiseSchedule {
    pub fn from_betas(beta: Vec<f64>) -> Result<Self> {
        if beta.is_empty() {
            return Err(Error::config("noise schedule needs at least one step"));
        }
        if let Some(b) = beta.iter().find(|&&b| !(b > 0.0 && b < 1.0)) {
            return Err(Error::config(format!("beta {b} not in (0,1)")));
        }
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(beta.len());
        let mut acc = 1.0;
        for a in &alpha {
            acc *= a;
            alpha_bar.push(acc);
        }
        let posterior_var = (0..beta.len())
            .map(|i| {
                let prev = if i == 0 { 1.0 } else { alpha_bar[i - 1] };
                (1.0 - prev) / (1.0 - alpha_bar[i]) * beta[i]
            })
            .collect();
        Ok(NoiseSchedule { steps: beta.len(), beta, alpha, alpha_bar, posterior_var })
    }

    /// Linear β from `start` to `end` over `steps` steps.
    pub fn linear(steps: usize, start: f64, end: f64) -> Result<Self> {
        let beta = (0..steps)
            .map(|i| if steps == 1 { start } else { start + (end - start) * i as f64 / (steps - 1) as f64 })
            .collect();
        Self::from_betas(beta)
    }

    /// Linear 1e-4 → 0.02 over `steps` steps.
    pub fn default_linear(steps: usize) -> Self {
        Self::linear(steps, 1e-4, 0.02).expect("default schedule is valid")
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps {
            return Err(Error::Range(format!("diffusion step {t} not in [1, {}]", self.steps)));
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t - 1]
    }

    pub fn posterior_var(&self, t: usize) -> f64 {
        self.posterior_var[t - 1]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_schedule_invariants() {
        let s = NoiseSchedule::default_linear(100);
        assert!(s.alpha_bar(1) > 0.99);
        assert!(s.alpha_bar.windows(2).all(|w| w[1] < w[0]));
        assert_eq!(s.posterior_var(1), 0.0);
        // cumulative product recomputed independently in log space
        let mut log_acc = 0.0f64;
        for t in 1..=100 {
            log_acc += (1.0 - s.beta(t)).ln();
            assert!((log_acc.exp() - s.alpha_bar(t)).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_bad_betas() {
        assert!(NoiseSchedule::from_betas(vec![0.1, 1.0]).is_err());
        assert!(NoiseSchedule::from_betas(vec![]).is_err());
        assert!(NoiseSchedule::default_linear(10).check_step(11).is_err());
        assert!(NoiseSchedule::default_linear(10).check_step(0).is_err());
    }
}
