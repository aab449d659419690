//! Normalizing flows of Knothe-Rosenblatt type (KRnet), VAEs whose prior and
//! encoder carry such flows, and variational Bayes solvers built on both.
//!
//! Modules, bottom up:
//!
//! - [`numerics`]: tensors, a reverse-mode tape, MLPs, Adam, seeded RNG.
//! - [`flow_layers`]: squeeze, LU rotation, scale-bias, affine coupling and
//!   the CDF-based nonlinear layer, each with forward, inverse and log-det.
//! - [`krnet`]: the staged flow and its density.
//! - [`vae`] and [`vae_krnet`]: Gaussian heads, the ELBO, flow-based priors
//!   and encoders, marginal likelihood estimators, data training.
//! - [`vb`]: targets, variational losses (including the `lambda`-weighted
//!   one) and the training loop.
//! - [`experiments`]: linear latent data, hole priors, the random-field
//!   inverse problem with its exact posterior, posterior statistics.
//! - [`manifest`] and [`cli`]: plain-text model files and the `vaekrnet` binary.
//!
//! The `examples/` directory walks through each of these.

pub mod error;
pub mod flow_layers;
pub mod krnet;
pub mod numerics;
pub mod vae;
pub mod vae_krnet;
pub mod vb;
pub mod experiments;
pub mod manifest;
pub mod cli;

pub use error::{Error, Result};
