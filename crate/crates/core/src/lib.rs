//! Matrix-free hyperparameter estimation for hierarchical Bayesian linear
//! inverse problems.
//!
//! The negative log marginal posterior
//!
//! ```text
//! F(θ) = -log π(θ) + ½ logdet Ψ(θ) + ½ ‖A(y) μ - b‖²_{Ψ(θ)⁻¹},
//! Ψ(θ) = A(y) Q(ψ) A(y)ᵀ + R(ψ),
//! ```
//!
//! is minimized over a box of hyperparameters θ = (ψ, y) with two methods:
//!
//! * [`mm::m3c_optimize`]: majorization-minimization where the log-determinant
//!   is replaced by its tangent-plane majorant and the resulting trace term is
//!   estimated with Rademacher probes solved once per outer iteration.
//! * [`saa::saa_optimize`]: sample average approximation of the objective
//!   using stochastic Lanczos quadrature for the log-determinant.
//!
//! Everything is matrix-free through [`linalg::SymOp`] and [`linalg::LinOp`];
//! dense oracles are available for problems up to [`linalg::DENSE_LIMIT`].

pub mod bounds;
pub mod error;
pub mod linalg;
pub mod metrics;
pub mod mm;
pub mod model;
pub mod objective;
pub mod saa;

pub use error::{Error, Result};
