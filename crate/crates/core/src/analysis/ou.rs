use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const DEFAULT_OU_GAMMA: f64 = 0.05;

/// Discretized Ornstein-Uhlenbeck walk applied coordinatewise.
///
/// - literal: `z_{t+1} = −γ·z_t + σ·W_t`, stationary for `|γ| < 1`
/// - mean-reverting: `z_{t+1} = (1−γ)·z_t + σ·W_t`, with `γ ∈ [0, 1)`
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OUConfig {
    pub gamma: f64,
    pub sigma: f64,
    pub steps: usize,
    pub literal_mode: bool,
}

impl OUConfig {
    /// Mean-reverting walk with unit stationary variance.
    pub fn mean_reverting(gamma: f64, steps: usize) -> Result<Self> {
        let sigma = (1.0 - (1.0 - gamma).powi(2)).max(0.0).sqrt();
        let c = OUConfig { gamma, sigma, steps, literal_mode: false };
        c.validate()?;
        Ok(c)
    }

    pub fn literal(gamma: f64, sigma: f64, steps: usize) -> Result<Self> {
        let c = OUConfig { gamma, sigma, steps, literal_mode: true };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let ok_gamma = if self.literal_mode {
            self.gamma.abs() < 1.0
        } else {
            (0.0..1.0).contains(&self.gamma)
        };
        if !ok_gamma {
            return Err(Error::InvalidConfig(format!(
                "gamma {} outside the stationary range of the {} walk",
                self.gamma,
                if self.literal_mode { "literal" } else { "mean-reverting" }
            )));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::InvalidConfig(format!("sigma must be finite and non-negative, got {}", self.sigma)));
        }
        Ok(())
    }

    /// Coefficient `a` of `z_{t+1} = a·z_t + σ·W_t`.
    pub fn coefficient(&self) -> f64 {
        if self.literal_mode {
            -self.gamma
        } else {
            1.0 - self.gamma
        }
    }

    /// `σ² / (1 − a²)`.
    pub fn stationary_variance(&self) -> f64 {
        let a = self.coefficient();
        self.sigma * self.sigma / (1.0 - a * a)
    }
}

impl Default for OUConfig {
    fn default() -> Self {
        OUConfig::mean_reverting(DEFAULT_OU_GAMMA, 100).expect("valid defaults")
    }
}

/// Iterates `z_1 … z_steps` starting from `z_0 = start` (which is not
/// included). Returns a `[steps, len(start)]` matrix.
pub fn ou_walk(start: &[f64], cfg: &OUConfig, seed: u64) -> Result<Tensor> {
    cfg.validate()?;
    let n = start.len();
    let a = cfg.coefficient();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut z = start.to_vec();
    let mut out = Vec::with_capacity(cfg.steps * n);
    for _ in 0..cfg.steps {
        for v in z.iter_mut() {
            let w: f64 = StandardNormal.sample(&mut rng);
            *v = a * *v + cfg.sigma * w;
        }
        out.extend_from_slice(&z);
    }
    Tensor::matrix(cfg.steps, n, out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn column(t: &Tensor, j: usize) -> Vec<f64> {
        (0..t.rows()).map(|r| t.get(r, j)).collect()
    }

    fn variance(x: &[f64]) -> f64 {
        let m = x.iter().sum::<f64>() / x.len() as f64;
        x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (x.len() - 1) as f64
    }

    fn lag1(x: &[f64]) -> f64 {
        let m = x.iter().sum::<f64>() / x.len() as f64;
        let num: f64 = x.windows(2).map(|w| (w[0] - m) * (w[1] - m)).sum();
        let den: f64 = x.iter().map(|v| (v - m) * (v - m)).sum();
        num / den
    }

    #[test]
    fn zero_noise_literal_collapses() {
        let c = OUConfig::literal(0.0, 0.0, 4).unwrap();
        let w = ou_walk(&[3.0, -7.0], &c, 1).unwrap();
        assert!(w.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn zero_noise_mean_reverting_halves() {
        let c = OUConfig { gamma: 0.5, sigma: 0.0, steps: 4, literal_mode: false };
        let w = ou_walk(&[8.0], &c, 1).unwrap();
        assert_eq!(w.data(), &[4.0, 2.0, 1.0, 0.5]);
    }

    #[test]
    fn defaults_have_unit_stationary_variance() {
        let c = OUConfig::default();
        assert_eq!(c.gamma, 0.05);
        assert!((c.sigma - (1.0f64 - 0.95 * 0.95).sqrt()).abs() < 1e-15);
        assert!((c.stationary_variance() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn gamma_range_is_checked() {
        assert!(OUConfig::literal(1.0, 1.0, 3).is_err());
        assert!(OUConfig::literal(-0.9, 1.0, 3).is_ok());
        assert!(OUConfig::mean_reverting(1.0, 3).is_err());
        assert!(OUConfig::mean_reverting(-0.1, 3).is_err());
        assert!(OUConfig::mean_reverting(0.0, 3).is_ok());
        assert!(OUConfig::literal(0.3, -1.0, 3).is_err());
    }

    #[test]
    fn literal_walk_matches_ar1_statistics() {
        let c = OUConfig::literal(0.3, 1.0, 100_000).unwrap();
        let w = column(&ou_walk(&[0.0], &c, 42).unwrap(), 0);
        let v = variance(&w);
        assert!((v / (1.0 / (1.0 - 0.09)) - 1.0).abs() < 0.1, "{}", v);
        assert!((lag1(&w) + 0.3).abs() < 0.02);
    }

    #[test]
    fn mean_reverting_walk_matches_ar1_statistics() {
        let c = OUConfig::mean_reverting(0.2, 100_000).unwrap();
        let w = column(&ou_walk(&[0.0], &c, 7).unwrap(), 0);
        assert!((lag1(&w) - 0.8).abs() < 0.02);
        assert!((variance(&w) - 1.0).abs() < 0.1);
    }

    #[test]
    fn seeded_walks_repeat() {
        let c = OUConfig::default();
        assert_eq!(ou_walk(&[1.0, 2.0], &c, 3).unwrap(), ou_walk(&[1.0, 2.0], &c, 3).unwrap());
    }
}
