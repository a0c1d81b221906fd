//! Sequential-optimisation sequential Monte Carlo (SOSMC) for tuning the
//! parameters of Gibbs models `π_θ(x) ∝ exp(-U_θ(x))`.

pub mod checks;
pub mod diagnostics;
pub mod error;
pub mod estimators;
pub mod kernels;
pub mod models;
pub mod optim;
pub mod par;
pub mod particles;
pub mod pretrain;
pub mod rewards;
pub mod rng;

pub use error::{Error, Result};
