//! Simulation and verification toolkit for interacting particle systems with
//! common noise, the grid evolution of their conditional densities, and the
//! induced deterministic dynamics on spaces of probability measures.
//!
//! The crate is organized around a three-level hierarchy:
//!
//! 1. **Particle level** ([`particle`]): explicit Euler–Maruyama simulation of
//!    `dX_t = b(t, mu_t, X_t) dt + sigma(t, mu_t, X_t) dW_t + gamma(t, mu_t, X_t) dB_t`,
//!    where `W` is idiosyncratic noise, `B` is noise shared by every particle,
//!    and `mu_t` is the conditional law of `X_t` given the shared noise
//!    (approximated by the cross-particle empirical measure).
//! 2. **Density level** ([`spde`]): a one-dimensional finite-volume solver for
//!    the stochastic Fokker–Planck equation satisfied by the conditional
//!    density, `d rho = [-(b rho)' + ((a rho)''/2)] dt - (gamma rho)' dB`,
//!    with `a = sigma sigma^T + gamma gamma^T`, plus pathwise weak-form
//!    residual checks and a mollified L^2 contraction diagnostic.
//! 3. **Measure level** ([`fpe`]): cylindrical functionals
//!    `F(m) = f(<m, phi_1>, ..., <m, phi_K>)`, their measure derivatives, the
//!    associated second-order generator, and Monte Carlo residual checks of
//!    the Fokker–Planck equation satisfied by the law of `mu_t`.
//!
//! On top of the hierarchy sit projection utilities: Markovian (mimicking)
//! projection by kernel regression ([`mimic`]), mollified and cutoff coefficient
//! systems ([`mollify`]), and an open-loop-to-Markovian conversion bench for
//! mean-field control problems ([`mfc`]).
//!
//! Everything stochastic is driven by counter-derived deterministic streams
//! ([`rng`]); re-running any experiment with the same seeds reproduces every
//! drawn bit regardless of thread count or scheduling.

#![forbid(unsafe_code)]

pub mod coeffs;
pub mod error;
pub mod fpe;
pub mod grid;
pub mod measure;
pub mod mfc;
pub mod mimic;
pub mod mollify;
pub mod numerics;
pub mod particle;
pub mod regression;
pub mod rng;
pub mod scenario;
pub mod spde;
pub mod testfn;

pub use error::{Error, Result};

/// Library version, exposed so artifact manifests can record it.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
