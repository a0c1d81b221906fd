use rand::Rng;

use crate::error::{config_err, Error, Result};
use crate::rng::{fill_standard_normal, StreamRng};

use super::{ExactSampler, GibbsModel};

/// Mixture potential `V(x, θ) = -log Σ_i softmax(θ)_i exp(-‖x-μ_i‖²/σ²)`.
///
/// Only the logits are trainable; the means and `σ²` are fixed. Each
/// component is a Gaussian with variance `σ²/2` per coordinate, so the
/// normaliser `(πσ²)^{d/2}` does not depend on θ.
#[derive(Debug, Clone)]
pub struct MixturePotential {
    logits: Vec<f64>,
    log_softmax: Vec<f64>,
    means: Vec<f64>,
    dim: usize,
    sigma_sq: f64,
}

fn log_softmax(logits: &[f64], out: &mut [f64]) {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
    for (o, l) in out.iter_mut().zip(logits) {
        *o = l - lse;
    }
}

impl MixturePotential {
    pub fn new(logits: Vec<f64>, means: Vec<f64>, dim: usize, sigma_sq: f64) -> Result<Self> {
        let m = logits.len();
        if m == 0 || dim == 0 {
            return Err(config_err("mixture needs at least one component and one dimension"));
        }
        if means.len() != m * dim {
            return Err(Error::Dimension {
                expected: m * dim,
                got: means.len(),
            });
        }
        if !(sigma_sq > 0.0 && sigma_sq.is_finite()) {
            return Err(config_err("mixture sigma_sq must be positive"));
        }
        crate::error::ensure_finite(&logits, "mixture logit")?;
        let mut log_softmax_v = vec![0.0; m];
        log_softmax(&logits, &mut log_softmax_v);
        Ok(Self {
            logits,
            log_softmax: log_softmax_v,
            means,
            dim,
            sigma_sq,
        })
    }

    /// Two equally weighted modes at `(±2, 2)` with `σ² = 1`.
    pub fn dual() -> Self {
        Self::new(vec![0.0, 0.0], vec![-2.0, 2.0, 2.0, 2.0], 2, 1.0).expect("valid preset")
    }

    /// Four modes at `(±2, ±2)` with `σ² = 0.5`; the mode at `(2, 2)` carries
    /// weight `e⁻³ / (3 + e⁻³) ≈ 0.016`, so little reference mass sits under
    /// the default gated reward.
    pub fn sparse() -> Self {
        Self::new(
            vec![0.0, 0.0, 0.0, -3.0],
            vec![-2.0, -2.0, 2.0, -2.0, -2.0, 2.0, 2.0, 2.0],
            2,
            0.5,
        )
        .expect("valid preset")
    }

    /// Looks up a preset by name (`dual`, `sparse`).
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "dual" => Ok(Self::dual()),
            "sparse" => Ok(Self::sparse()),
            other => Err(config_err(format!("unknown mixture preset {other:?} (dual, sparse)"))),
        }
    }

    pub fn num_components(&self) -> usize {
        self.logits.len()
    }

    pub fn means(&self) -> &[f64] {
        &self.means
    }

    pub fn mean(&self, i: usize) -> &[f64] {
        &self.means[i * self.dim..(i + 1) * self.dim]
    }

    pub fn sigma_sq(&self) -> f64 {
        self.sigma_sq
    }

    /// Mixture weights `softmax(θ)`.
    pub fn weights(&self) -> Vec<f64> {
        self.log_softmax.iter().map(|l| l.exp()).collect()
    }

    /// `log ∫ exp(-V) dx = (d/2) log(πσ²)`.
    pub fn log_normalizer(&self) -> f64 {
        0.5 * self.dim as f64 * (std::f64::consts::PI * self.sigma_sq).ln()
    }

    /// Fills `resp` with the responsibilities `r_i(x)` and returns `V(x)`.
    fn responsibilities(&self, x: &[f64], resp: &mut [f64]) -> f64 {
        let mut max = f64::NEG_INFINITY;
        for (i, r) in resp.iter_mut().enumerate() {
            let sq: f64 = x.iter().zip(self.mean(i)).map(|(a, b)| (a - b) * (a - b)).sum();
            *r = self.log_softmax[i] - sq / self.sigma_sq;
            max = max.max(*r);
        }
        let mut total = 0.0;
        for r in resp.iter_mut() {
            *r = (*r - max).exp();
            total += *r;
        }
        for r in resp.iter_mut() {
            *r /= total;
        }
        -(max + total.ln())
    }
}

impl GibbsModel for MixturePotential {
    fn dim(&self) -> usize {
        self.dim
    }

    fn num_params(&self) -> usize {
        self.logits.len()
    }

    fn params(&self) -> &[f64] {
        &self.logits
    }

    fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.logits.len() {
            return Err(Error::Dimension {
                expected: self.logits.len(),
                got: params.len(),
            });
        }
        self.logits.copy_from_slice(params);
        log_softmax(&self.logits, &mut self.log_softmax);
        Ok(())
    }

    fn potential(&self, x: &[f64]) -> f64 {
        let mut resp = vec![0.0; self.logits.len()];
        self.responsibilities(x, &mut resp)
    }

    fn potential_and_grad_x(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        let mut resp = vec![0.0; self.logits.len()];
        let v = self.responsibilities(x, &mut resp);
        grad.iter_mut().for_each(|g| *g = 0.0);
        let c = 2.0 / self.sigma_sq;
        for (i, r) in resp.iter().enumerate() {
            for (j, g) in grad.iter_mut().enumerate() {
                *g += r * c * (x[j] - self.mean(i)[j]);
            }
        }
        v
    }

    fn grad_theta(&self, x: &[f64], out: &mut [f64]) {
        self.responsibilities(x, out);
        for (o, l) in out.iter_mut().zip(&self.log_softmax) {
            *o = l.exp() - *o;
        }
    }

    fn accumulate_grad_theta(&self, x: &[f64], scale: f64, acc: &mut [f64]) {
        let mut resp = vec![0.0; self.logits.len()];
        self.responsibilities(x, &mut resp);
        for ((a, r), l) in acc.iter_mut().zip(&resp).zip(&self.log_softmax) {
            *a += scale * (l.exp() - r);
        }
    }
}

impl ExactSampler for MixturePotential {
    fn sample_into(&self, rng: &mut StreamRng, out: &mut [f64]) {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut pick = self.logits.len() - 1;
        for (i, l) in self.log_softmax.iter().enumerate() {
            acc += l.exp();
            if u < acc {
                pick = i;
                break;
            }
        }
        fill_standard_normal(rng, out);
        let sd = (0.5 * self.sigma_sq).sqrt();
        for (o, m) in out.iter_mut().zip(self.mean(pick)) {
            *o = m + sd * *o;
        }
    }
}
