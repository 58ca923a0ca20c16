//! Emulation and robustness analysis for Bayesian computations.
//!
//! A Bayesian analysis is treated as a stochastic computer model mapping a
//! prior/likelihood specification `x` to posterior features `f(x)`. The crate
//! designs runs over a specification space, evaluates them by MCMC, fits
//! Gaussian-process emulators to the noisy features and answers robustness
//! questions (sensitivity, region extrema, decision probabilities) through
//! the emulators.

pub mod error;
pub mod mcmc;
pub mod rng;
pub mod robustness;
pub mod space;
pub mod gp;
pub mod pipeline;
pub mod service;
pub mod store;
pub mod targets;

pub use error::{Error, Result};
