//! Parameterised Gibbs models `π_θ(x) ∝ exp(-U_θ(x))`.
//!
//! Every model exposes its potential, the spatial gradient `∇_x U` used by
//! Langevin kernels, and the per-sample parameter gradient `∇_θ U` used by
//! the score-function gradient estimators.

mod gaussian;
mod mixture;
mod mlp;

pub use gaussian::GaussianLocation;
pub use mixture::MixturePotential;
pub use mlp::{MlpArchitecture, MlpEnergy, MlpScratch};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;

pub trait GibbsModel: Send + Sync {
    /// State-space dimension `d_x`.
    fn dim(&self) -> usize;

    /// Parameter dimension `d_θ`.
    fn num_params(&self) -> usize;

    fn params(&self) -> &[f64];

    fn set_params(&mut self, params: &[f64]) -> Result<()>;

    fn potential(&self, x: &[f64]) -> f64;

    /// Writes `∇_x U(x)` into `grad` and returns `U(x)`.
    fn potential_and_grad_x(&self, x: &[f64], grad: &mut [f64]) -> f64;

    /// Writes `∇_θ U(x)` into `out`.
    fn grad_theta(&self, x: &[f64], out: &mut [f64]);

    /// `acc += scale · ∇_θ U(x)`.
    fn accumulate_grad_theta(&self, x: &[f64], scale: f64, acc: &mut [f64]) {
        let mut g = vec![0.0; self.num_params()];
        self.grad_theta(x, &mut g);
        for (a, v) in acc.iter_mut().zip(&g) {
            *a += scale * v;
        }
    }

    /// Batched potential and spatial gradient over row-major `positions`.
    ///
    /// Models with per-call scratch state override this to reuse buffers.
    fn potential_and_grad_x_rows(&self, positions: &[f64], potentials: &mut [f64], grads: &mut [f64]) {
        let d = self.dim();
        par::for_each_row_mut2(grads, d, potentials, 1, |i, g, u| {
            u[0] = self.potential_and_grad_x(&positions[i * d..(i + 1) * d], g);
        });
    }

    fn potential_rows(&self, positions: &[f64], potentials: &mut [f64]) {
        let d = self.dim();
        par::for_each_row_mut(potentials, 1, |i, u| {
            u[0] = self.potential(&positions[i * d..(i + 1) * d]);
        });
    }

    /// `Σ_i coefs[i] · ∇_θ U(x_i)`, reduced in a fixed order.
    fn weighted_grad_theta_sum(&self, positions: &[f64], coefs: &[f64]) -> Vec<f64> {
        let d = self.dim();
        par::sum_vec(coefs.len(), self.num_params(), |i, acc| {
            if coefs[i] != 0.0 {
                self.accumulate_grad_theta(&positions[i * d..(i + 1) * d], coefs[i], acc);
            }
        })
    }

    fn grad_theta_rows(&self, positions: &[f64], out: &mut [f64]) {
        let d = self.dim();
        let p = self.num_params();
        par::for_each_row_mut(out, p, |i, g| {
            self.grad_theta(&positions[i * d..(i + 1) * d], g);
        });
    }
}

/// Number of `d`-dimensional rows in `positions`.
pub fn row_count(positions: &[f64], d: usize) -> Result<usize> {
    if positions.len() % d != 0 {
        return Err(Error::Dimension {
            expected: d,
            got: positions.len() % d,
        });
    }
    Ok(positions.len() / d)
}

fn first_bad_row(values: &[f64], width: usize, what: &'static str) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(pos) => Err(Error::NonFinite {
            what,
            index: pos / width.max(1),
        }),
        None => Ok(()),
    }
}

/// Potentials of every row; errors name the first non-finite row.
pub fn potentials<M: GibbsModel + ?Sized>(model: &M, positions: &[f64]) -> Result<Vec<f64>> {
    let n = row_count(positions, model.dim())?;
    let mut u = vec![0.0; n];
    model.potential_rows(positions, &mut u);
    first_bad_row(&u, 1, "potential")?;
    Ok(u)
}

/// Potentials and spatial gradients (row-major `N × d_x`) of every row.
pub fn potentials_and_grads_x<M: GibbsModel + ?Sized>(model: &M, positions: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    let d = model.dim();
    let n = row_count(positions, d)?;
    let mut u = vec![0.0; n];
    let mut g = vec![0.0; n * d];
    model.potential_and_grad_x_rows(positions, &mut u, &mut g);
    first_bad_row(&u, 1, "potential")?;
    first_bad_row(&g, d, "spatial gradient")?;
    Ok((u, g))
}

/// Per-sample parameter gradients as a row-major `N × d_θ` matrix.
pub fn grad_theta_batch<M: GibbsModel + ?Sized>(model: &M, positions: &[f64]) -> Result<Vec<f64>> {
    let n = row_count(positions, model.dim())?;
    let p = model.num_params();
    let mut out = vec![0.0; n * p];
    model.grad_theta_rows(positions, &mut out);
    first_bad_row(&out, p, "parameter gradient")?;
    Ok(out)
}

/// Models that can be sampled exactly (used for reference batches and initial particles).
pub trait ExactSampler: Send + Sync {
    fn sample_into(&self, rng: &mut crate::rng::StreamRng, out: &mut [f64]);
}

/// Draws `n` exact samples, lane `i` of stream `name` producing sample `i`.
pub fn sample_exact<S: ExactSampler + ?Sized>(
    sampler: &S,
    dim: usize,
    n: usize,
    streams: &crate::rng::RngStreams,
    name: &str,
    counter: u64,
) -> Vec<f64> {
    let mut out = vec![0.0; n * dim];
    par::for_each_row_mut(&mut out, dim, |i, row| {
        let mut rng = streams.lane(name, counter, i as u64);
        sampler.sample_into(&mut rng, row);
    });
    out
}

/// Serialised form of any model: a tagged architecture descriptor plus parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelDocument {
    GaussianLocation {
        theta: Vec<f64>,
        /// Row-major `d × d` covariance.
        sigma_cov: Vec<f64>,
    },
    Mixture {
        theta: Vec<f64>,
        /// Row-major `m × d` component means.
        means: Vec<f64>,
        dim: usize,
        sigma_sq: f64,
    },
    Mlp {
        architecture: MlpArchitecture,
        params: Vec<f64>,
    },
}

/// Runtime-dispatched model, as loaded from a [`ModelDocument`].
#[derive(Debug, Clone)]
pub enum AnyModel {
    Gaussian(GaussianLocation),
    Mixture(MixturePotential),
    Mlp(MlpEnergy),
}

impl AnyModel {
    pub fn from_document(doc: &ModelDocument) -> Result<Self> {
        Ok(match doc {
            ModelDocument::GaussianLocation { theta, sigma_cov } => {
                AnyModel::Gaussian(GaussianLocation::new(theta.clone(), sigma_cov.clone())?)
            }
            ModelDocument::Mixture {
                theta,
                means,
                dim,
                sigma_sq,
            } => AnyModel::Mixture(MixturePotential::new(theta.clone(), means.clone(), *dim, *sigma_sq)?),
            ModelDocument::Mlp { architecture, params } => {
                AnyModel::Mlp(MlpEnergy::from_params(architecture.clone(), params.clone())?)
            }
        })
    }

    pub fn to_document(&self) -> ModelDocument {
        match self {
            AnyModel::Gaussian(m) => ModelDocument::GaussianLocation {
                theta: m.params().to_vec(),
                sigma_cov: m.covariance().to_vec(),
            },
            AnyModel::Mixture(m) => ModelDocument::Mixture {
                theta: m.params().to_vec(),
                means: m.means().to_vec(),
                dim: m.dim(),
                sigma_sq: m.sigma_sq(),
            },
            AnyModel::Mlp(m) => ModelDocument::Mlp {
                architecture: m.architecture().clone(),
                params: m.params().to_vec(),
            },
        }
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let doc: ModelDocument = serde_json::from_str(&text)?;
        Self::from_document(&doc)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.to_document())?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn exact_sampler(&self) -> Option<&dyn ExactSampler> {
        match self {
            AnyModel::Gaussian(m) => Some(m),
            AnyModel::Mixture(m) => Some(m),
            AnyModel::Mlp(_) => None,
        }
    }
}

macro_rules! dispatch {
    ($self:ident, $m:ident => $e:expr) => {
        match $self {
            AnyModel::Gaussian($m) => $e,
            AnyModel::Mixture($m) => $e,
            AnyModel::Mlp($m) => $e,
        }
    };
}

impl GibbsModel for AnyModel {
    fn dim(&self) -> usize {
        dispatch!(self, m => m.dim())
    }
    fn num_params(&self) -> usize {
        dispatch!(self, m => m.num_params())
    }
    fn params(&self) -> &[f64] {
        dispatch!(self, m => m.params())
    }
    fn set_params(&mut self, params: &[f64]) -> Result<()> {
        dispatch!(self, m => m.set_params(params))
    }
    fn potential(&self, x: &[f64]) -> f64 {
        dispatch!(self, m => m.potential(x))
    }
    fn potential_and_grad_x(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        dispatch!(self, m => m.potential_and_grad_x(x, grad))
    }
    fn grad_theta(&self, x: &[f64], out: &mut [f64]) {
        dispatch!(self, m => m.grad_theta(x, out))
    }
    fn accumulate_grad_theta(&self, x: &[f64], scale: f64, acc: &mut [f64]) {
        dispatch!(self, m => m.accumulate_grad_theta(x, scale, acc))
    }
    fn potential_and_grad_x_rows(&self, positions: &[f64], potentials: &mut [f64], grads: &mut [f64]) {
        dispatch!(self, m => m.potential_and_grad_x_rows(positions, potentials, grads))
    }
    fn potential_rows(&self, positions: &[f64], potentials: &mut [f64]) {
        dispatch!(self, m => m.potential_rows(positions, potentials))
    }
    fn grad_theta_rows(&self, positions: &[f64], out: &mut [f64]) {
        dispatch!(self, m => m.grad_theta_rows(positions, out))
    }
    fn weighted_grad_theta_sum(&self, positions: &[f64], coefs: &[f64]) -> Vec<f64> {
        dispatch!(self, m => m.weighted_grad_theta_sum(positions, coefs))
    }
}
