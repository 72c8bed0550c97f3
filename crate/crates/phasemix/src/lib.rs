//! Numerical library for certifying deviation bounds of statistical
//! ensembles under nearly integrable Hamiltonian flows.
//!
//! The crate computes every term of a five-part deviation bound — resonant
//! probability mass, a `1/t` phase-mixing constant with traceable per-mode
//! contributions, a high-frequency Fourier tail, and normal-form plus
//! equilibrium-change errors — and compares the assembled bound against
//! brute-force ensemble simulation.
//!
//! Module map:
//! - [`space`], [`grid`], [`rng`]: phase-space primitives, quadrature grids,
//!   deterministic randomness.
//! - [`expr`], [`model`]: expression-tree coefficients and trigonometric-
//!   polynomial Hamiltonians, densities, observables.
//! - [`flow`]: exact integrable flow and symplectic integrators.
//! - [`estimator`]: ensemble averages, sampling, empirical deviation series.
//! - [`spectral`]: Fourier mode extraction, mode products, tail sums.
//! - [`mixing`]: integration-by-parts machinery and the mixing constant.
//! - [`resonance`]: resonant/nonresonant partition and parameter schedules.
//! - [`normalform`]: one-step (optionally iterated) Lie normal form.
//! - [`bound`]: bound assembly, verdicts, exponential time windows.

pub mod bound;
pub mod error;
pub mod estimator;
pub mod expr;
pub mod flow;
pub mod grid;
pub mod mixing;
pub mod model;
pub mod normalform;
pub mod resonance;
pub mod rng;
pub mod space;
pub mod spectral;

pub use error::{Error, Result};
