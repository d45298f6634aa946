//! Mixture multi-resolution approximation (mixture M-RA) for Gaussian
//! spatial processes.
//!
//! The crate builds a recursive predictive-process basis over a partitioned
//! spatial domain, places a heredity-constrained two-component shrinkage
//! mixture prior on the basis-function weights, and fits the resulting
//! hierarchical model by MCMC. Posterior inclusion probabilities of the
//! latent indicators identify subregions where the spatial correlation
//! decays slowly (weights shrunk to zero) versus quickly (weights active),
//! which is how regions of local stationarity are detected.
//!
//! Modules follow the pipeline: [`geometry`] (partition tree and knots),
//! [`covariance`] and [`bessel`] (Matern family), [`basis`] (recursive basis
//! construction), [`model`] (priors and densities), [`sampler`] (MCMC),
//! [`inference`] (summaries, classification, prediction), [`simulate`]
//! (synthetic data generators), [`diagnostics`] (variograms, stationary
//! refits, convergence checks), and [`pipeline`] (config-driven runs backing
//! the CLI).

pub mod basis;
pub mod bessel;
pub mod covariance;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod geometry;
pub mod inference;
pub mod model;
pub mod pipeline;
pub mod sampler;
pub mod simulate;

pub use error::{Error, Result};
