//! Reward functions `R(x)` for KL-regularised tuning.
//!
//! Gated and half-plane rewards use exact indicators; the gradient
//! estimators never differentiate `R`, so the discontinuities are harmless.

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HalfPlane {
    /// `x₁ < 0`
    Left,
    /// `x₁ > 0`
    Right,
    /// `x₂ < 0`
    Lower,
    /// `x₂ > 0`
    Upper,
}

impl HalfPlane {
    pub fn contains(&self, x: &[f64]) -> bool {
        match self {
            HalfPlane::Left => x[0] < 0.0,
            HalfPlane::Right => x[0] > 0.0,
            HalfPlane::Lower => x[1] < 0.0,
            HalfPlane::Upper => x[1] > 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Reward {
    /// `1{x₁ ≥ 0} exp(-‖x - c‖²/τ)`
    HardGated { center: Vec<f64>, tau: f64 },
    /// `sigmoid(x₁/λ) exp(-‖x - c‖²/τ)`
    SmoothGated { center: Vec<f64>, tau: f64, lambda: f64 },
    /// `max_j exp(-‖x - c_j‖²/τ)`
    MultiModal { centers: Vec<Vec<f64>>, tau: f64 },
    /// Indicator of a half-plane.
    HalfPlane { side: HalfPlane },
    Constant { value: f64 },
}

fn gaussian_bump(x: &[f64], c: &[f64], tau: f64) -> f64 {
    let sq: f64 = x.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum();
    (-sq / tau).exp()
}

impl Reward {
    pub fn evaluate(&self, x: &[f64]) -> f64 {
        match self {
            Reward::HardGated { center, tau } => {
                if x[0] >= 0.0 {
                    gaussian_bump(x, center, *tau)
                } else {
                    0.0
                }
            }
            Reward::SmoothGated { center, tau, lambda } => {
                let gate = 1.0 / (1.0 + (-x[0] / lambda).exp());
                gate * gaussian_bump(x, center, *tau)
            }
            Reward::MultiModal { centers, tau } => centers
                .iter()
                .map(|c| gaussian_bump(x, c, *tau))
                .fold(0.0, f64::max),
            Reward::HalfPlane { side } => {
                if side.contains(x) {
                    1.0
                } else {
                    0.0
                }
            }
            Reward::Constant { value } => *value,
        }
    }

    /// Short name used in configs and summaries.
    pub fn tag(&self) -> &'static str {
        match self {
            Reward::HardGated { .. } => "hard_gated",
            Reward::SmoothGated { .. } => "smooth_gated",
            Reward::MultiModal { .. } => "multi_modal",
            Reward::HalfPlane { side: HalfPlane::Left } => "left",
            Reward::HalfPlane { side: HalfPlane::Right } => "right",
            Reward::HalfPlane { side: HalfPlane::Lower } => "lower",
            Reward::HalfPlane { side: HalfPlane::Upper } => "upper",
            Reward::Constant { .. } => "constant",
        }
    }

    /// Parses a reward name with the default constants, e.g. `"lower"` or `"hard_gated"`.
    pub fn from_name(name: &str) -> Result<Self> {
        Ok(match name {
            "hard_gated" | "hard" => Reward::HardGated {
                center: DEFAULT_CENTER.to_vec(),
                tau: DEFAULT_TAU,
            },
            "smooth_gated" | "smooth" => Reward::SmoothGated {
                center: DEFAULT_CENTER.to_vec(),
                tau: DEFAULT_TAU,
                lambda: DEFAULT_LAMBDA,
            },
            "multi_modal" | "multi" => Reward::MultiModal {
                centers: vec![vec![2.0, 2.0], vec![-2.0, -2.0]],
                tau: DEFAULT_TAU,
            },
            "left" => Reward::HalfPlane { side: HalfPlane::Left },
            "right" => Reward::HalfPlane { side: HalfPlane::Right },
            "lower" => Reward::HalfPlane { side: HalfPlane::Lower },
            "upper" => Reward::HalfPlane { side: HalfPlane::Upper },
            other => return Err(config_err(format!("unknown reward {other:?}"))),
        })
    }

    /// Rewards needing coordinates beyond the state dimension are rejected.
    pub fn check_dim(&self, dim: usize) -> Result<()> {
        let need = match self {
            Reward::HardGated { center, .. } | Reward::SmoothGated { center, .. } => center.len(),
            Reward::MultiModal { centers, .. } => centers.iter().map(Vec::len).max().unwrap_or(0),
            Reward::HalfPlane {
                side: HalfPlane::Lower | HalfPlane::Upper,
            } => 2,
            Reward::HalfPlane { .. } => 1,
            Reward::Constant { .. } => 0,
        };
        if need > dim {
            return Err(config_err(format!(
                "reward {} needs {need} coordinates but the state has {dim}",
                self.tag()
            )));
        }
        Ok(())
    }
}

/// Default gate centre `c`.
pub const DEFAULT_CENTER: [f64; 2] = [2.0, 2.0];
/// Default temperature `τ`.
pub const DEFAULT_TAU: f64 = 2.0;
/// Default gate sharpness `λ`.
pub const DEFAULT_LAMBDA: f64 = 0.1;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn half_planes_are_indicators() {
        let r = Reward::from_name("lower").unwrap();
        assert_eq!(r.evaluate(&[0.3, -0.1]), 1.0);
        assert_eq!(r.evaluate(&[0.3, 0.0]), 0.0);
        assert_eq!(Reward::from_name("left").unwrap().evaluate(&[-1e-9]), 1.0);
        assert_eq!(Reward::from_name("right").unwrap().evaluate(&[0.0, 5.0]), 0.0);
    }

    #[test]
    fn hard_gate_is_exact() {
        let r = Reward::HardGated {
            center: vec![0.0, 0.0],
            tau: 1.0,
        };
        assert_eq!(r.evaluate(&[0.0, 0.0]), 1.0);
        assert_eq!(r.evaluate(&[-1e-12, 0.0]), 0.0);
        assert!((r.evaluate(&[1.0, 0.0]) - (-1.0f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn smooth_gate_and_multi_modal() {
        let s = Reward::SmoothGated {
            center: vec![0.0, 0.0],
            tau: 1.0,
            lambda: 0.5,
        };
        assert!((s.evaluate(&[0.0, 0.0]) - 0.5).abs() < 1e-15);
        let m = Reward::MultiModal {
            centers: vec![vec![1.0, 0.0], vec![-1.0, 0.0]],
            tau: 1.0,
        };
        assert_eq!(m.evaluate(&[1.0, 0.0]), 1.0);
        assert_eq!(m.evaluate(&[-1.0, 0.0]), 1.0);
    }

    #[test]
    fn rewards_are_bounded_on_the_box() {
        for name in ["hard", "smooth", "multi", "left", "right", "lower", "upper"] {
            let r = Reward::from_name(name).unwrap();
            for i in 0..25 {
                for j in 0..25 {
                    let x = [-6.0 + 0.5 * i as f64, -6.0 + 0.5 * j as f64];
                    let v = r.evaluate(&x);
                    assert!((0.0..=1.0).contains(&v), "{name} at {x:?}: {v}");
                }
            }
        }
    }

    #[test]
    fn unknown_name_is_an_error() {
        assert!(Reward::from_name("sideways").is_err());
    }

    #[test]
    fn dimension_checks() {
        assert!(Reward::from_name("lower").unwrap().check_dim(1).is_err());
        assert!(Reward::from_name("left").unwrap().check_dim(1).is_ok());
        assert!(Reward::from_name("hard").unwrap().check_dim(2).is_ok());
        assert!(Reward::from_name("hard").unwrap().check_dim(1).is_err());
    }
}
