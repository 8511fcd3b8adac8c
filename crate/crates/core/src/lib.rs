//! Non-parametric Bayesian inference of the drift and diffusion of 1D diffusion
//! processes from simulated trajectories.
//!
//! Pipeline: [`sde`] simulates data, [`data`] turns it into Gaussian
//! observations, [`fem`] solves the MFPT and Fokker–Planck forward problems,
//! [`bip`] differentiates the misfit, [`prior`] supplies the Matérn-type prior,
//! and [`optimize`], [`laplace`] and [`mcmc`] characterize the posterior.

pub mod bip;
pub mod data;
pub mod error;
pub mod fem;
pub mod laplace;
pub mod linalg;
pub mod mcmc;
pub mod optimize;
pub mod prior;
pub mod sde;

pub use error::{Error, Result};
