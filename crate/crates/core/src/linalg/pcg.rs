//! Preconditioned conjugate gradient.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use super::nystrom::Preconditioner;
use super::op::SymOp;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PcgOptions {
    /// Relative residual target `‖op x − b‖ ≤ tol ‖b‖`.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for PcgOptions {
    fn default() -> Self {
        Self { tol: 1e-8, max_iter: 500 }
    }
}

#[derive(Debug, Clone)]
pub struct PcgOutcome {
    pub x: DVector<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub relative_residual: f64,
}

pub fn pcg_solve(
    op: &dyn SymOp,
    rhs: &DVector<f64>,
    pre: Option<&dyn Preconditioner>,
    opts: &PcgOptions,
) -> Result<PcgOutcome> {
    let m = op.dim();
    if rhs.len() != m {
        return Err(Error::invalid(format!("right-hand side has length {}, operator dimension {m}", rhs.len())));
    }
    if !(opts.tol > 0.0 && opts.tol < 1.0) {
        return Err(Error::invalid(format!("PCG tolerance must lie in (0, 1), got {}", opts.tol)));
    }
    if let Some(p) = pre {
        if p.dim() != m {
            return Err(Error::invalid("preconditioner dimension mismatch"));
        }
    }
    let bnorm = rhs.norm();
    if !bnorm.is_finite() {
        return Err(Error::numerical("non-finite right-hand side"));
    }
    if bnorm == 0.0 {
        return Ok(PcgOutcome { x: DVector::zeros(m), iterations: 0, converged: true, relative_residual: 0.0 });
    }

    let precondition = |r: &DVector<f64>| match pre {
        Some(p) => p.apply_inverse(r),
        None => r.clone(),
    };

    let mut x = DVector::zeros(m);
    let mut r = rhs.clone();
    let mut z = precondition(&r);
    let mut p = z.clone();
    let mut rz = r.dot(&z);
    let target = opts.tol * bnorm;
    let mut rnorm = bnorm;

    for it in 1..=opts.max_iter {
        let ap = op.apply(&p);
        let pap = p.dot(&ap);
        if !pap.is_finite() || !rz.is_finite() {
            return Err(Error::numerical(format!("non-finite value in PCG iteration {it}")));
        }
        if pap <= 0.0 {
            return Err(Error::numerical(format!("operator not positive definite (pᵀAp = {pap:e}) in PCG iteration {it}")));
        }
        let step = rz / pap;
        x.axpy(step, &p, 1.0);
        r.axpy(-step, &ap, 1.0);
        rnorm = r.norm();
        if !rnorm.is_finite() {
            return Err(Error::numerical(format!("non-finite residual in PCG iteration {it}")));
        }
        if rnorm <= target {
            return Ok(PcgOutcome { x, iterations: it, converged: true, relative_residual: rnorm / bnorm });
        }
        z = precondition(&r);
        let rz_new = r.dot(&z);
        let beta = rz_new / rz;
        rz = rz_new;
        p = &z + p * beta;
    }
    Ok(PcgOutcome { x, iterations: opts.max_iter, converged: false, relative_residual: rnorm / bnorm })
}
