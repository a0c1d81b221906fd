//! Weighted particle populations.
//!
//! Weights are kept in the log domain. Any exponentiation is preceded by
//! subtracting the maximum log-weight, so populations whose log-weights drift
//! far from zero never overflow.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;

use crate::error::{Error, Result};
use crate::par;

/// Normalised importance weights: non-negative, summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightVector(Vec<f64>);

impl WeightVector {
    /// Uniform weights `1/n`.
    pub fn uniform(n: usize) -> Self {
        WeightVector(vec![1.0 / n as f64; n])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Effective sample size `1 / Σ w_i²`.
    pub fn ess(&self) -> f64 {
        ess(self)
    }
}

impl std::ops::Index<usize> for WeightVector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

/// `N` particles in `dim` dimensions with unnormalised log-weights.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleSystem {
    dim: usize,
    positions: Vec<f64>,
    log_weights: Vec<f64>,
    step: usize,
}

impl ParticleSystem {
    /// Builds a uniformly weighted population from row-major positions.
    pub fn new(dim: usize, positions: Vec<f64>) -> Result<Self> {
        if dim == 0 || positions.is_empty() || positions.len() % dim != 0 {
            return Err(Error::Config(format!(
                "positions of length {} do not form rows of width {dim}",
                positions.len()
            )));
        }
        crate::error::ensure_finite(&positions, "particle position")?;
        let n = positions.len() / dim;
        Ok(Self {
            dim,
            positions,
            log_weights: vec![0.0; n],
            step: 0,
        })
    }

    pub fn with_log_weights(mut self, log_weights: Vec<f64>) -> Result<Self> {
        if log_weights.len() != self.len() {
            return Err(Error::Dimension {
                expected: self.len(),
                got: log_weights.len(),
            });
        }
        self.log_weights = log_weights;
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.log_weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_weights.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn set_step(&mut self, step: usize) {
        self.step = step;
    }

    pub fn positions(&self) -> &[f64] {
        &self.positions
    }

    pub fn positions_mut(&mut self) -> &mut [f64] {
        &mut self.positions
    }

    pub fn particle(&self, i: usize) -> &[f64] {
        &self.positions[i * self.dim..(i + 1) * self.dim]
    }

    pub fn log_weights(&self) -> &[f64] {
        &self.log_weights
    }

    pub fn log_weights_mut(&mut self) -> &mut [f64] {
        &mut self.log_weights
    }

    /// Subtracts the maximum so the largest log-weight is exactly zero.
    pub fn recenter(&mut self) -> Result<()> {
        let max = max_log_weight(&self.log_weights)?;
        for lw in &mut self.log_weights {
            *lw -= max;
        }
        Ok(())
    }

    pub fn weights(&self) -> Result<WeightVector> {
        normalize_weights(&self.log_weights)
    }

    pub fn reset_weights(&mut self) {
        self.log_weights.iter_mut().for_each(|w| *w = 0.0);
    }
}

fn max_log_weight(log_weights: &[f64]) -> Result<f64> {
    let mut max = f64::NEG_INFINITY;
    for (i, &lw) in log_weights.iter().enumerate() {
        if lw.is_nan() || lw == f64::INFINITY {
            return Err(Error::NonFinite {
                what: "log-weight",
                index: i,
            });
        }
        max = max.max(lw);
    }
    if max == f64::NEG_INFINITY {
        return Err(Error::DegenerateWeights);
    }
    Ok(max)
}

/// Softmax of log-weights, computed after subtracting the maximum.
///
/// Entries may be `-inf` (zero weight) but not all of them.
pub fn normalize_weights(log_weights: &[f64]) -> Result<WeightVector> {
    let max = max_log_weight(log_weights)?;
    let mut w: Vec<f64> = log_weights.iter().map(|lw| (lw - max).exp()).collect();
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= total);
    Ok(WeightVector(w))
}

/// Effective sample size `1 / Σ w_i²` of normalised weights.
pub fn ess(weights: &WeightVector) -> f64 {
    1.0 / weights.0.iter().map(|w| w * w).sum::<f64>()
}

/// Ancestor indices drawn categorically by weight.
pub fn resample_indices<R: Rng + ?Sized>(weights: &WeightVector, n: usize, rng: &mut R) -> Result<Vec<usize>> {
    let dist = WeightedIndex::new(weights.as_slice()).map_err(|_| Error::DegenerateWeights)?;
    Ok((0..n).map(|_| dist.sample(rng)).collect())
}

/// Multinomial resampling: `N` offspring drawn by weight, weights reset to uniform.
pub fn resample<R: Rng + ?Sized>(system: &ParticleSystem, rng: &mut R) -> Result<ParticleSystem> {
    let weights = system.weights()?;
    let ancestors = resample_indices(&weights, system.len(), rng)?;
    let d = system.dim;
    let mut positions = Vec::with_capacity(system.positions.len());
    for &a in &ancestors {
        positions.extend_from_slice(system.particle(a));
    }
    Ok(ParticleSystem {
        dim: d,
        positions,
        log_weights: vec![0.0; system.len()],
        step: system.step,
    })
}

/// `Σ_i w_i φ(X_i)` for a vector-valued test function of output width `width`.
///
/// `phi` writes its value into the provided buffer.
pub fn weighted_mean<F>(system: &ParticleSystem, weights: &WeightVector, width: usize, phi: F) -> Result<Vec<f64>>
where
    F: Fn(&[f64], &mut [f64]) + Sync + Send,
{
    weighted_mean_rows(system.positions(), system.dim(), weights, width, phi)
}

/// [`weighted_mean`] over raw row-major positions.
pub fn weighted_mean_rows<F>(positions: &[f64], dim: usize, weights: &WeightVector, width: usize, phi: F) -> Result<Vec<f64>>
where
    F: Fn(&[f64], &mut [f64]) + Sync + Send,
{
    let n = weights.len();
    // First non-finite row, if any, is reported after the reduction.
    let bad = std::sync::atomic::AtomicUsize::new(usize::MAX);
    let total = par::sum_vec(n, width, |i, acc| {
        let mut buf = vec![0.0; width];
        phi(&positions[i * dim..(i + 1) * dim], &mut buf);
        if buf.iter().any(|v| !v.is_finite()) {
            bad.fetch_min(i, std::sync::atomic::Ordering::Relaxed);
            return;
        }
        let w = weights[i];
        for (a, b) in acc.iter_mut().zip(&buf) {
            *a += w * b;
        }
    });
    let bad = bad.into_inner();
    if bad != usize::MAX {
        return Err(Error::NonFinite {
            what: "test function value",
            index: bad,
        });
    }
    Ok(total)
}
