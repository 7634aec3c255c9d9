//! Matrix-free linear algebra: operator traits, Lanczos, PCG, a randomized
//! Nyström preconditioner, Rademacher probes and dense oracles.

mod dense;
mod lanczos;
mod nystrom;
mod op;
mod pcg;
mod probes;

pub use dense::{
    check_dense_limit, cholesky_lower, dense_logdet, offdiag_norms, random_spd, sym_function,
    OffdiagNorms,
};
pub use lanczos::{
    gauss_rule, lanczos_decompose, lanczos_inv_sqrt_apply, lanczos_quadform, lanczos_quadform_log,
    LanczosDecomp, BREAKDOWN_TOL,
};
pub use nystrom::{nystrom_preconditioner, IdentityPreconditioner, NystromPreconditioner, Preconditioner, WhitenedOp, PreconditionedOp};
pub use op::{Counter, DenseSymOp, LinOp, SymOp, DENSE_LIMIT};
pub use pcg::{pcg_solve, PcgOptions, PcgOutcome};
pub use probes::{split_seed, ProbeSet};

/// Sum in a fixed pairwise order so that results do not depend on how the
/// terms were produced (serially or in parallel).
pub fn pairwise_sum(values: &[f64]) -> f64 {
    match values.len() {
        0 => 0.0,
        1 => values[0],
        2 => values[0] + values[1],
        n if n <= 8 => values.iter().fold(0.0, |acc, v| acc + v),
        n => {
            let (lo, hi) = values.split_at(n / 2);
            pairwise_sum(lo) + pairwise_sum(hi)
        }
    }
}
