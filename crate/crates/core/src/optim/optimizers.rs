use serde::{Deserialize, Serialize};

use crate::error::{config_err, ensure_finite, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptMethod {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerSpec {
    pub method: OptMethod,
    pub learning_rate: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    /// Global-norm clip applied to `g` before the update.
    #[serde(default)]
    pub grad_clip_norm: Option<f64>,
}

fn default_beta1() -> f64 {
    0.9
}

fn default_beta2() -> f64 {
    0.999
}

fn default_epsilon() -> f64 {
    1e-8
}

impl OptimizerSpec {
    pub fn sgd(learning_rate: f64) -> Self {
        Self {
            method: OptMethod::Sgd,
            learning_rate,
            beta1: default_beta1(),
            beta2: default_beta2(),
            epsilon: default_epsilon(),
            grad_clip_norm: None,
        }
    }

    pub fn adam(learning_rate: f64) -> Self {
        Self {
            method: OptMethod::Adam,
            ..Self::sgd(learning_rate)
        }
    }

    pub fn with_clip(mut self, norm: f64) -> Self {
        self.grad_clip_norm = Some(norm);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(config_err("learning rate must be positive"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(config_err("Adam betas must lie in [0, 1)"));
        }
        if self.epsilon <= 0.0 {
            return Err(config_err("Adam epsilon must be positive"));
        }
        if let Some(c) = self.grad_clip_norm {
            if !(c > 0.0) {
                return Err(config_err("gradient clip norm must be positive"));
            }
        }
        Ok(())
    }
}

/// Optimiser memory: Adam moments and the update counter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptState {
    pub spec: OptimizerSpec,
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step_count: u64,
}

/// Rescales `g` so its Euclidean norm is at most `max_norm`.
pub fn clip_global_norm(g: &[f64], max_norm: f64) -> Vec<f64> {
    let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        g.iter().map(|v| v * s).collect()
    } else {
        g.to_vec()
    }
}

impl OptState {
    pub fn new(spec: OptimizerSpec, num_params: usize) -> Result<Self> {
        spec.validate()?;
        Ok(Self {
            spec,
            first_moment: vec![0.0; num_params],
            second_moment: vec![0.0; num_params],
            step_count: 0,
        })
    }

    fn prepare(&self, theta: &[f64], g: &[f64]) -> Result<Vec<f64>> {
        if g.len() != theta.len() {
            return Err(Error::Dimension {
                expected: theta.len(),
                got: g.len(),
            });
        }
        ensure_finite(g, "optimiser gradient")?;
        Ok(match self.spec.grad_clip_norm {
            Some(c) => clip_global_norm(g, c),
            None => g.to_vec(),
        })
    }

    /// One descent step `θ ← OPT(θ, g)` using the configured method.
    pub fn step(&mut self, theta: &mut [f64], g: &[f64]) -> Result<()> {
        match self.spec.method {
            OptMethod::Sgd => self.sgd_step(theta, g),
            OptMethod::Adam => self.adam_step(theta, g),
        }
    }

    /// `θ ← θ - η g`.
    pub fn sgd_step(&mut self, theta: &mut [f64], g: &[f64]) -> Result<()> {
        let g = self.prepare(theta, g)?;
        for (t, gi) in theta.iter_mut().zip(&g) {
            *t -= self.spec.learning_rate * gi;
        }
        self.step_count += 1;
        Ok(())
    }

    /// Bias-corrected Adam update.
    pub fn adam_step(&mut self, theta: &mut [f64], g: &[f64]) -> Result<()> {
        let g = self.prepare(theta, g)?;
        self.step_count += 1;
        let OptimizerSpec {
            learning_rate,
            beta1,
            beta2,
            epsilon,
            ..
        } = self.spec;
        let t = self.step_count as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (((th, gi), m), v) in theta
            .iter_mut()
            .zip(&g)
            .zip(self.first_moment.iter_mut())
            .zip(self.second_moment.iter_mut())
        {
            *m = beta1 * *m + (1.0 - beta1) * gi;
            *v = beta2 * *v + (1.0 - beta2) * gi * gi;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *th -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_examples() {
        let mut s = OptState::new(OptimizerSpec::sgd(1.0), 1).unwrap();
        let mut theta = [5.0];
        s.sgd_step(&mut theta, &[5.0]).unwrap();
        assert_eq!(theta, [0.0]);
        s.sgd_step(&mut theta, &[0.0]).unwrap();
        assert_eq!(theta, [0.0]);
        assert_eq!(s.step_count, 2);
    }

    #[test]
    fn clipping_halves_an_oversized_gradient() {
        let mut s = OptState::new(OptimizerSpec::sgd(1.0).with_clip(10.0), 2).unwrap();
        let mut theta = [0.0, 0.0];
        s.step(&mut theta, &[12.0, 16.0]).unwrap();
        assert!((theta[0] + 6.0).abs() < 1e-12 && (theta[1] + 8.0).abs() < 1e-12);
    }

    #[test]
    fn adam_first_step_has_learning_rate_magnitude() {
        for g in [3.0, -0.02, 1e4] {
            let mut s = OptState::new(OptimizerSpec::adam(0.1), 1).unwrap();
            let mut theta = [1.0];
            s.step(&mut theta, &[g]).unwrap();
            let delta = (theta[0] - 1.0).abs();
            assert!((delta - 0.1).abs() / 0.1 < 1e-6, "g={g}: {delta}");
        }
    }

    #[test]
    fn adam_zero_gradient_and_saturation() {
        let mut s = OptState::new(OptimizerSpec::adam(0.1), 1).unwrap();
        let mut theta = [2.0];
        s.step(&mut theta, &[0.0]).unwrap();
        assert_eq!(theta, [2.0]);

        let mut s = OptState::new(OptimizerSpec::adam(0.1), 1).unwrap();
        let mut theta = [0.0];
        s.step(&mut theta, &[1.5]).unwrap();
        let first = theta[0].abs();
        let before = theta[0];
        s.step(&mut theta, &[1.5]).unwrap();
        assert!((theta[0] - before).abs() <= first + 1e-12);
    }

    #[test]
    fn rejects_non_finite_gradients_and_bad_specs() {
        let mut s = OptState::new(OptimizerSpec::sgd(0.1), 1).unwrap();
        assert!(s.step(&mut [0.0], &[f64::NAN]).is_err());
        assert!(OptState::new(OptimizerSpec::sgd(0.0), 1).is_err());
        assert!(OptState::new(OptimizerSpec::sgd(0.1).with_clip(-1.0), 1).is_err());
    }
}
