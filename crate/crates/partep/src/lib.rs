//! Expectation-propagation inference on partitioned data.
//!
//! The data are split into `K` pieces, each piece gets a Gaussian *site*
//! approximation stored in natural parameters, and the sites are refined
//! iteratively: remove a site from the global approximation to form its
//! *cavity*, combine the cavity with the piece's true likelihood to form
//! the *tilted* distribution, approximate the tilted moments, and update
//! the site so that site x cavity matches them. The crate provides
//!
//! * [`natgauss`] — exact algebra and stabilization for multivariate
//!   Gaussians in natural parameters, the currency of all messages;
//! * [`engine`] — the damped serial/parallel outer loop with positive
//!   definiteness guards and marginal-likelihood accumulation;
//! * [`tilted`] — pluggable tilted-moment backends (Laplace mode finding,
//!   adaptive random-walk Metropolis, importance reuse of earlier draws);
//! * [`hier`] — hierarchical algorithms that keep per-partition local
//!   parameters out of the global state, in both the marginalized form
//!   and the explicit block form with closed-form outer sites;
//! * [`lowrank`] — dimension-reduced sites for likelihoods that depend on
//!   `z_k = U_k' theta`, with one-dimensional quadrature tilted moments;
//! * [`models`] — model shards (hierarchical logistic regression with a
//!   simulator, conjugate Gaussian oracles) and coverage reporting;
//! * [`cli`] — the batch harness behind the `partep` binary.
//!
//! Entry points are deliberately plain functions and small structs; see
//! the `examples/` directory for one runnable program per capability.

pub mod cli;
pub mod engine;
pub mod error;
pub mod hier;
pub mod lowrank;
pub mod models;
pub mod natgauss;
pub mod tilted;

pub use error::{Error, Result};
pub use natgauss::{MomentGaussian, NaturalGaussian, WeightedDraws};
