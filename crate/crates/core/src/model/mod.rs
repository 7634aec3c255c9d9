//! Problem specification: parametric forward map, covariances, hyperprior,
//! the Ψ(θ) operator, and built-in test problems.

mod components;
mod deblur;
mod matern;
mod params;
mod prior;
mod problem;
mod superres;
mod testproblem;
mod tomo;

pub use components::{FixedCov, FixedForward, MaternCovModel, Scale, ScaledIdentity, ScaledIdentityCov, ScaledIdentityNoise};
pub use deblur::{Conv2d, DeblurForward};
pub use matern::{matern_cov, MaternKernel, Smoothness};
pub use params::{HyperParams, ParamBox};
pub use prior::{HyperPrior, PriorComponent};
pub use problem::{
    CountedOp, CovarianceModel, DenseParts, Derivative, ForwardModel, Ledger, LedgerSnapshot, NoiseCov,
    NoiseModel, ProblemParts, ProblemSpec, PsiDerivative, PsiOperator,
};
pub use superres::SuperresForward;
pub use testproblem::{
    make_test_problem, noise_only_problem, phantom, BoundsConfig, DeblurConfig, SuperresConfig, TestProblem,
    TomoConfig, TruthSource,
};
pub use tomo::{cell_centers, ray_geometry, ray_matrix};
