//! The negative log marginal posterior `F(θ)`, its SLQ approximation and
//! gradients.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::{
    cholesky_lower, lanczos_inv_sqrt_apply, lanczos_quadform_log, pairwise_sum, pcg_solve, PcgOptions,
    PreconditionedOp, Preconditioner, ProbeSet, SymOp,
};
use crate::model::{HyperParams, ParamBox, ProblemSpec, PsiOperator};

/// Default relative step for finite-difference operator derivatives.
pub const FD_STEP: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct ObjectiveEval {
    /// `prior_part + ½ logdet_part + ½ misfit`.
    pub value: f64,
    /// `Ψ(θ)⁻¹ (A(y) μ_x − b)`.
    pub r: DVector<f64>,
    pub misfit: f64,
    pub logdet_part: f64,
    pub prior_part: f64,
    pub pcg_iterations: usize,
    /// False when the misfit solve hit its iteration cap.
    pub converged: bool,
}

impl ObjectiveEval {
    fn assemble(prior_part: f64, logdet_part: f64, misfit: f64, r: DVector<f64>, iters: usize, converged: bool) -> Result<Self> {
        let value = prior_part + 0.5 * logdet_part + 0.5 * misfit;
        if !value.is_finite() {
            return Err(Error::numerical(format!(
                "objective is not finite (prior {prior_part}, logdet {logdet_part}, misfit {misfit})"
            )));
        }
        Ok(Self { value, r, misfit, logdet_part, prior_part, pcg_iterations: iters, converged })
    }
}

/// Dense factorization of Ψ(θ) shared by the exact paths.
pub(crate) struct DenseState {
    pub parts: crate::model::DenseParts,
    pub psi: DMatrix<f64>,
    pub chol: DMatrix<f64>,
    pub resid: DVector<f64>,
}

impl DenseState {
    pub fn new(problem: &ProblemSpec, theta: &HyperParams) -> Result<Self> {
        let parts = problem.dense_parts(theta)?;
        let psi = parts.psi();
        let chol = cholesky_lower(&psi)?;
        let resid = &parts.a * problem.prior_mean() - problem.data();
        Ok(Self { parts, psi, chol, resid })
    }

    pub fn logdet(&self) -> f64 {
        2.0 * self.chol.diagonal().iter().map(|d| d.ln()).sum::<f64>()
    }

    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        let y = self.chol.solve_lower_triangular(b).expect("nonsingular Cholesky factor");
        self.chol.tr_solve_lower_triangular(&y).expect("nonsingular Cholesky factor")
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        let m = self.psi.nrows();
        let linv = self.chol.solve_lower_triangular(&DMatrix::identity(m, m)).expect("nonsingular Cholesky factor");
        linv.tr_mul(&linv)
    }
}

/// Exact `F(θ)` from a dense Cholesky factorization of Ψ(θ).
pub fn eval_f_exact(problem: &ProblemSpec, theta: &HyperParams) -> Result<ObjectiveEval> {
    let state = DenseState::new(problem, theta)?;
    let (prior, _) = problem.hyperprior_eval(theta)?;
    let r = state.solve(&state.resid);
    let misfit = state.resid.dot(&r);
    ObjectiveEval::assemble(prior, state.logdet(), misfit, r, 0, true)
}

/// `r = Ψ⁻¹(Aμ − b)` by PCG; returns the residual vector too.
pub(crate) fn misfit_solve(
    problem: &ProblemSpec,
    psi: &PsiOperator,
    pre: Option<&dyn Preconditioner>,
    pcg: &PcgOptions,
) -> Result<(DVector<f64>, crate::linalg::PcgOutcome)> {
    let resid = problem.residual(psi.forward());
    let sol = pcg_solve(psi, &resid, pre, pcg)?;
    Ok((resid, sol))
}

/// SLQ estimate of `log det Ψ`: raw Lanczos on Ψ, or `log det P` plus SLQ
/// on `G Ψ Gᵀ` when a preconditioner is given.
pub fn slq_logdet(
    psi: &dyn SymOp,
    probes: &ProbeSet,
    k: usize,
    pre: Option<&dyn Preconditioner>,
) -> Result<f64> {
    let m = psi.dim();
    if probes.dim() != m {
        return Err(Error::invalid(format!("probes have dimension {}, operator {m}", probes.dim())));
    }
    if k == 0 {
        return Err(Error::invalid("Lanczos steps must be >= 1"));
    }
    let k = k.min(m);
    let terms: Vec<f64> = match pre {
        None => (0..probes.len())
            .into_par_iter()
            .map(|i| lanczos_quadform_log(psi, &probes.column(i), k))
            .collect::<Result<_>>()?,
        Some(p) => {
            let op = PreconditionedOp::new(psi, p)?;
            (0..probes.len())
                .into_par_iter()
                .map(|i| lanczos_quadform_log(&op, &probes.column(i), k))
                .collect::<Result<_>>()?
        }
    };
    let shift = pre.map_or(0.0, |p| p.logdet());
    Ok(shift + pairwise_sum(&terms) / probes.len() as f64)
}

/// `F̂_SL(θ)`: SLQ log-determinant and a PCG misfit.
pub fn eval_f_slq(
    problem: &ProblemSpec,
    theta: &HyperParams,
    probes: &ProbeSet,
    k: usize,
    pre: Option<&dyn Preconditioner>,
    pcg: &PcgOptions,
) -> Result<ObjectiveEval> {
    let psi = problem.build_psi(theta)?;
    let (prior, _) = problem.hyperprior_eval(theta)?;
    let logdet = slq_logdet(&psi, probes, k, pre)?;
    let (resid, sol) = misfit_solve(problem, &psi, pre, pcg)?;
    let misfit = resid.dot(&sol.x);
    ObjectiveEval::assemble(prior, logdet, misfit, sol.x, sol.iterations, sol.converged)
}

/// Exact gradient from dense traces `tr(Ψ⁻¹ ∂Ψ/∂θ_j)`.
pub fn grad_f_exact(problem: &ProblemSpec, theta: &HyperParams) -> Result<DVector<f64>> {
    let state = DenseState::new(problem, theta)?;
    let (_, mut grad) = problem.hyperprior_eval(theta)?;
    let inv = state.inverse();
    let r = state.solve(&state.resid);
    for j in 0..problem.n_params() {
        let (dpsi, dmu) = problem.dense_psi_derivative_with(theta, j, &state.parts)?;
        let trace = inv.component_mul(&dpsi).sum();
        grad[j] += 0.5 * trace - 0.5 * r.dot(&(&dpsi * &r - dmu * 2.0));
    }
    Ok(grad)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McOptions {
    /// Use `ζᵢ = Gᵀ(GΨGᵀ)^{-1/2} wᵢ` and `ζᵢᵀ ∂Ψ ζᵢ` instead of `zᵢ = Ψ⁻¹wᵢ`.
    pub symmetrize: bool,
    pub pcg: PcgOptions,
    /// Relative step for finite-difference operator derivatives.
    pub fd_step: f64,
}

impl Default for McOptions {
    fn default() -> Self {
        Self { symmetrize: false, pcg: PcgOptions::default(), fd_step: FD_STEP }
    }
}

#[derive(Debug, Clone)]
pub struct McGradient {
    pub grad: DVector<f64>,
    pub pcg_iterations: usize,
}

/// Monte-Carlo gradient of `F`.
pub fn grad_f_mc(
    problem: &ProblemSpec,
    theta: &HyperParams,
    probes: &ProbeSet,
    k: usize,
    pre: Option<&dyn Preconditioner>,
    opts: &McOptions,
    r: Option<&DVector<f64>>,
) -> Result<McGradient> {
    let psi = problem.build_psi(theta)?;
    let m = psi.dim();
    if probes.dim() != m {
        return Err(Error::invalid(format!("probes have dimension {}, operator {m}", probes.dim())));
    }
    let mut pcg_iterations = 0;
    let r = match r {
        Some(r) => r.clone(),
        None => {
            let (_, sol) = misfit_solve(problem, &psi, pre, &opts.pcg)?;
            pcg_iterations += sol.iterations;
            sol.x
        }
    };
    let n = probes.len();
    // Left and right vectors of each probe quadratic form.
    let pairs: Vec<(DVector<f64>, DVector<f64>)> = if opts.symmetrize {
        if k == 0 {
            return Err(Error::invalid("Lanczos steps must be >= 1"));
        }
        let k = k.min(m);
        let zetas: Vec<DVector<f64>> = match pre {
            Some(p) => {
                let op = PreconditionedOp::new(&psi, p)?;
                (0..n)
                    .into_par_iter()
                    .map(|i| lanczos_inv_sqrt_apply(&op, &probes.column(i), k).map(|v| p.apply_factor_t(&v)))
                    .collect::<Result<_>>()?
            }
            None => (0..n).into_par_iter().map(|i| lanczos_inv_sqrt_apply(&psi, &probes.column(i), k)).collect::<Result<_>>()?,
        };
        zetas.into_iter().map(|z| (z.clone(), z)).collect()
    } else {
        let solved: Vec<crate::linalg::PcgOutcome> = (0..n)
            .into_par_iter()
            .map(|i| pcg_solve(&psi, &probes.column(i), pre, &opts.pcg))
            .collect::<Result<_>>()?;
        pcg_iterations += solved.iter().map(|s| s.iterations).sum::<usize>();
        solved.into_iter().enumerate().map(|(i, s)| (s.x, probes.column(i))).collect()
    };

    let (_, mut grad) = problem.hyperprior_eval(theta)?;
    for j in 0..problem.n_params() {
        let d = problem.psi_derivative(theta, j, opts.fd_step).map_err(|e| e.for_component(j))?;
        if d.is_zero() {
            continue;
        }
        let terms: Vec<f64> = pairs.par_iter().map(|(left, right)| left.dot(&d.apply(right))).collect();
        let trace = pairwise_sum(&terms) / n as f64;
        let misfit = r.dot(&(d.apply(&r) - d.forward_apply(problem.prior_mean()) * 2.0));
        let g = 0.5 * trace - 0.5 * misfit;
        if !g.is_finite() {
            return Err(Error::numerical("non-finite gradient entry").for_component(j));
        }
        grad[j] += g;
    }
    Ok(McGradient { grad, pcg_iterations })
}

/// Forward-difference gradient with steps `eps_rel·max(1, |θ_j|)`, taken
/// backwards when the forward point would leave the box. Uses `p + 1`
/// evaluations of `f`.
pub fn grad_fd(
    f: &mut dyn FnMut(&DVector<f64>) -> Result<f64>,
    theta: &DVector<f64>,
    bounds: &ParamBox,
    eps_rel: f64,
) -> Result<DVector<f64>> {
    bounds.check_dim(theta.len())?;
    if !(eps_rel > 0.0) {
        return Err(Error::invalid(format!("finite-difference step must be positive, got {eps_rel}")));
    }
    let steps: Vec<f64> = (0..theta.len())
        .map(|j| {
            let h = eps_rel * theta[j].abs().max(1.0);
            if bounds.width(j) < 2.0 * h {
                return Err(Error::invalid(format!(
                    "box component {j} has width {} < 2h = {}",
                    bounds.width(j),
                    2.0 * h
                )));
            }
            Ok(if theta[j] + h > bounds.upper()[j] { -h } else { h })
        })
        .collect::<Result<_>>()?;
    let f0 = f(theta)?;
    let mut grad = DVector::zeros(theta.len());
    for (j, &h) in steps.iter().enumerate() {
        let mut tp = theta.clone();
        tp[j] += h;
        grad[j] = (f(&tp)? - f0) / h;
    }
    Ok(grad)
}
