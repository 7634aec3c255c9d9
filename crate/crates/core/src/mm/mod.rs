//! Majorization-minimization (M³C).
//!
//! Each outer iteration freezes probe solves `zᵢ = Ψ_t⁻¹wᵢ` at the anchor
//! θ_t and minimizes the surrogate
//!
//! ```text
//! G(θ|θ_t) ≈ −log π(θ) + (1/2N) Σ zᵢᵀ Ψ(θ) wᵢ + ½ ‖A(y)μ − b‖²_{Ψ(θ)⁻¹}
//! ```
//!
//! with a few projected-gradient steps. The trace term replaces
//! `logdet Ψ(θ)` by its tangent plane at Ψ_t, which lies above it.

mod inner;
mod outer;
mod surrogate;

pub use inner::{
    projected_gradient_min, projected_gradient_min_observed, FnObjective, InnerObjective, InnerOptions, InnerResult,
    InnerStep, Scaling,
};
pub use outer::{
    m3c_optimize, AuditConfig, AuditMode, GradientMode, M3cConfig, PreconditionerConfig, ProbePolicy, SampleSchedule,
    SurrogateKind,
};
pub use surrogate::{
    eval_surrogate_mc, exact_surrogate, grad_surrogate_fd, grad_surrogate_mc, precompute_solves, psi_preconditioner,
    ExactSurrogate, MMState, SurrogateEval,
};

#[cfg(test)]
mod tests;
