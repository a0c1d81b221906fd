use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};

/// Adapted step sizes are kept within these bounds so that long runs of
/// shrinking or growing cannot reach zero or overflow.
pub const GAMMA_MIN: f64 = 1e-12;
pub const GAMMA_MAX: f64 = 1e6;

/// Multiplicative ESS-driven control of the kernel step size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepSizeAdapter {
    pub gamma: f64,
    pub factor: f64,
    pub tau_adapt: f64,
}

impl StepSizeAdapter {
    pub fn new(gamma: f64, factor: f64, tau_adapt: f64) -> Result<Self> {
        if !(gamma > 0.0 && gamma.is_finite()) {
            return Err(config_err("initial step size must be positive"));
        }
        if !(factor > 1.0 && factor.is_finite()) {
            return Err(config_err("adapt factor must exceed 1"));
        }
        if !(tau_adapt > 0.0 && tau_adapt < 1.0) {
            return Err(config_err("tau_adapt must lie in (0, 1)"));
        }
        Ok(Self { gamma, factor, tau_adapt })
    }

    /// `γ·c` if `ESS > τN`, `γ/c` if `ESS < τN`, unchanged at equality;
    /// clamped to `[GAMMA_MIN, GAMMA_MAX]`.
    pub fn adapt(&mut self, ess: f64, n_particles: usize) -> f64 {
        let threshold = self.tau_adapt * n_particles as f64;
        if ess > threshold {
            self.gamma *= self.factor;
        } else if ess < threshold {
            self.gamma /= self.factor;
        }
        self.gamma = self.gamma.clamp(GAMMA_MIN, GAMMA_MAX);
        self.gamma
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rule_examples() {
        let mut a = StepSizeAdapter::new(0.01, 1.1, 0.95).unwrap();
        assert!((a.adapt(970.0, 1000) - 0.011).abs() < 1e-15);
        let mut a = StepSizeAdapter::new(0.01, 1.1, 0.95).unwrap();
        assert!((a.adapt(500.0, 1000) - 0.01 / 1.1).abs() < 1e-15);
        let mut a = StepSizeAdapter::new(0.01, 1.1, 0.5).unwrap();
        assert_eq!(a.adapt(50.0, 100), 0.01);
    }

    #[test]
    fn gamma_stays_positive() {
        let mut a = StepSizeAdapter::new(1e-3, 2.0, 0.9).unwrap();
        for _ in 0..2000 {
            assert!(a.adapt(1.0, 10) > 0.0);
        }
        assert_eq!(a.gamma, GAMMA_MIN);
        for _ in 0..2000 {
            assert!(a.adapt(10.0, 10).is_finite());
        }
        assert_eq!(a.gamma, GAMMA_MAX);
        assert!(StepSizeAdapter::new(0.1, 1.0, 0.9).is_err());
        assert!(StepSizeAdapter::new(0.1, 1.1, 1.0).is_err());
    }
}
