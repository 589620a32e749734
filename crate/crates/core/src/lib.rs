//! Bayesian inference of cumulative exposure to extensive environmental
//! hazards such as canal networks.
//!
//! A log-Gaussian field lives on the network, households accumulate
//! kernel-weighted exposure to it, and binary outcomes follow a single-hit
//! dose-response law. Inference runs a no-U-turn sampler on the joint
//! posterior.

pub mod cli;
pub mod config;
pub mod diagnostics;
pub mod exposure;
pub mod geometry;
pub mod gp_field;
pub mod io;
pub mod model;
pub mod quadrature;
pub mod sampler;
pub mod simstudy;
