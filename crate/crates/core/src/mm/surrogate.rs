use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::{nystrom_preconditioner, pairwise_sum, pcg_solve, PcgOptions, Preconditioner, ProbeSet, SymOp, WhitenedOp};
use crate::model::{HyperParams, ProblemSpec, PsiOperator};
use crate::objective::{grad_fd, misfit_solve, DenseState, McGradient};

/// Probe solves `zᵢ = Ψ_t⁻¹ wᵢ` frozen at an anchor θ_t.
///
/// Immutable once built; a new anchor needs a new state.
pub struct MMState {
    anchor: HyperParams,
    probes: ProbeSet,
    solves: Vec<DVector<f64>>,
    pcg_iterations: usize,
    pre: Option<Arc<dyn Preconditioner>>,
}

impl MMState {
    pub fn anchor(&self) -> &HyperParams {
        &self.anchor
    }

    pub fn probes(&self) -> &ProbeSet {
        &self.probes
    }

    pub fn solves(&self) -> &[DVector<f64>] {
        &self.solves
    }

    pub fn n_probes(&self) -> usize {
        self.probes.len()
    }

    /// PCG iterations spent on the probe solves.
    pub fn pcg_iterations(&self) -> usize {
        self.pcg_iterations
    }

    pub fn preconditioner(&self) -> Option<&dyn Preconditioner> {
        self.pre.as_deref()
    }
}

/// Solve `Ψ(θ_t) zᵢ = wᵢ` for every probe in parallel. Any solve that misses
/// the tolerance is an error.
pub fn precompute_solves(
    problem: &ProblemSpec,
    anchor: &HyperParams,
    probes: ProbeSet,
    pre: Option<Arc<dyn Preconditioner>>,
    pcg: &PcgOptions,
) -> Result<MMState> {
    let psi = problem.build_psi(anchor)?;
    if probes.dim() != psi.dim() {
        return Err(Error::invalid(format!("probes have dimension {}, data {}", probes.dim(), psi.dim())));
    }
    let pre_ref = pre.as_deref();
    let outcomes: Vec<_> = (0..probes.len())
        .into_par_iter()
        .map(|i| pcg_solve(&psi, &probes.column(i), pre_ref, pcg))
        .collect::<Result<_>>()?;
    if let Some((i, o)) = outcomes.iter().enumerate().find(|(_, o)| !o.converged) {
        return Err(Error::NotConverged(format!(
            "probe solve {i}: relative residual {:e} after {} iterations",
            o.relative_residual, o.iterations
        )));
    }
    let pcg_iterations = outcomes.iter().map(|o| o.iterations).sum();
    let solves = outcomes.into_iter().map(|o| o.x).collect();
    Ok(MMState { anchor: anchor.clone(), probes, solves, pcg_iterations, pre })
}

/// Nyström preconditioner for Ψ. A scalar noise level is used as the shift;
/// otherwise Ψ is whitened by `R^{1/2}` first.
pub fn psi_preconditioner(psi: &PsiOperator, rank: usize, seed: u64) -> Result<Arc<dyn Preconditioner>> {
    match psi.noise().as_scalar() {
        Some(c) => Ok(Arc::new(nystrom_preconditioner(psi, c, rank, seed)?)),
        None => {
            let d = psi.noise().diag().map(f64::sqrt);
            let white = WhitenedOp::new(psi, d.clone())?;
            Ok(Arc::new(nystrom_preconditioner(&white, 1.0, rank, seed)?.with_scale(d)?))
        }
    }
}

#[derive(Debug, Clone)]
pub struct SurrogateEval {
    pub value: f64,
    /// `(1/N) Σ zᵢᵀ Ψ(θ) wᵢ`.
    pub trace_part: f64,
    pub misfit: f64,
    pub prior_part: f64,
    /// `Ψ(θ)⁻¹ (A(y) μ − b)`, reusable by the gradient.
    pub r: DVector<f64>,
    pub pcg_iterations: usize,
    /// False when the misfit solve hit its iteration cap.
    pub converged: bool,
}

fn check_state(state: &MMState, problem: &ProblemSpec, theta: &HyperParams) -> Result<()> {
    if state.probes.dim() != problem.data_dim() {
        return Err(Error::invalid("MM state was built for a different problem"));
    }
    problem.bounds().check_dim(theta.len())
}

/// Monte-Carlo surrogate `−log π(θ) + (1/2N) Σ zᵢᵀΨ(θ)wᵢ + ½ misfit(θ)`.
pub fn eval_surrogate_mc(
    state: &MMState,
    problem: &ProblemSpec,
    theta: &HyperParams,
    pcg: &PcgOptions,
) -> Result<SurrogateEval> {
    check_state(state, problem, theta)?;
    let psi = problem.build_psi(theta)?;
    let (prior_part, _) = problem.hyperprior_eval(theta)?;
    let terms: Vec<f64> = (0..state.n_probes())
        .into_par_iter()
        .map(|i| state.solves[i].dot(&psi.apply(&state.probes.column(i))))
        .collect();
    let trace_part = pairwise_sum(&terms) / state.n_probes() as f64;
    let (resid, sol) = misfit_solve(problem, &psi, state.preconditioner(), pcg)?;
    let misfit = resid.dot(&sol.x);
    let value = prior_part + 0.5 * trace_part + 0.5 * misfit;
    if !value.is_finite() {
        return Err(Error::numerical(format!(
            "surrogate is not finite (prior {prior_part}, trace {trace_part}, misfit {misfit})"
        )));
    }
    Ok(SurrogateEval {
        value,
        trace_part,
        misfit,
        prior_part,
        r: sol.x,
        pcg_iterations: sol.iterations,
        converged: sol.converged,
    })
}

/// Gradient of [`eval_surrogate_mc`]. Pass `r` from a previous evaluation at
/// the same θ to skip the misfit solve.
pub fn grad_surrogate_mc(
    state: &MMState,
    problem: &ProblemSpec,
    theta: &HyperParams,
    r: Option<&DVector<f64>>,
    pcg: &PcgOptions,
    fd_step: f64,
) -> Result<McGradient> {
    check_state(state, problem, theta)?;
    let mut pcg_iterations = 0;
    let r = match r {
        Some(r) => r.clone(),
        None => {
            let psi = problem.build_psi(theta)?;
            let (_, sol) = misfit_solve(problem, &psi, state.preconditioner(), pcg)?;
            pcg_iterations += sol.iterations;
            sol.x
        }
    };
    let probes: Vec<DVector<f64>> = (0..state.n_probes()).map(|i| state.probes.column(i)).collect();
    let (_, mut grad) = problem.hyperprior_eval(theta)?;
    for j in 0..problem.n_params() {
        let d = problem.psi_derivative(theta, j, fd_step).map_err(|e| e.for_component(j))?;
        if d.is_zero() {
            continue;
        }
        let terms: Vec<f64> = probes.par_iter().zip(state.solves.par_iter()).map(|(w, z)| z.dot(&d.apply(w))).collect();
        let trace = pairwise_sum(&terms) / probes.len() as f64;
        let misfit = r.dot(&(d.apply(&r) - d.forward_apply(problem.prior_mean()) * 2.0));
        let g = 0.5 * trace - 0.5 * misfit;
        if !g.is_finite() {
            return Err(Error::numerical("non-finite gradient entry").for_component(j));
        }
        grad[j] += g;
    }
    Ok(McGradient { grad, pcg_iterations })
}

/// Forward-difference gradient of the frozen-probe surrogate.
pub fn grad_surrogate_fd(
    state: &MMState,
    problem: &ProblemSpec,
    theta: &HyperParams,
    pcg: &PcgOptions,
    eps_rel: f64,
) -> Result<McGradient> {
    let mut pcg_iterations = 0;
    let n_psi = theta.n_psi();
    let grad = grad_fd(
        &mut |v| {
            let ev = eval_surrogate_mc(state, problem, &HyperParams::from_vector(v.clone(), n_psi)?, pcg)?;
            pcg_iterations += ev.pcg_iterations;
            Ok(ev.value)
        },
        theta.vector(),
        problem.bounds(),
        eps_rel,
    )?;
    Ok(McGradient { grad, pcg_iterations })
}

/// Dense majorant `G(θ|θ_t)` with the anchor factorization cached.
pub struct ExactSurrogate<'a> {
    problem: &'a ProblemSpec,
    anchor: HyperParams,
    logdet: f64,
    psi: DMatrix<f64>,
    inverse: DMatrix<f64>,
}

impl<'a> ExactSurrogate<'a> {
    pub fn new(problem: &'a ProblemSpec, anchor: &HyperParams) -> Result<Self> {
        let state = DenseState::new(problem, anchor)?;
        Ok(Self {
            problem,
            anchor: anchor.clone(),
            logdet: state.logdet(),
            inverse: state.inverse(),
            psi: state.psi,
        })
    }

    pub fn anchor(&self) -> &HyperParams {
        &self.anchor
    }

    /// `logdet Ψ_t + tr(Ψ_t⁻¹(Ψ(θ) − Ψ_t))`, an upper bound on `logdet Ψ(θ)`.
    pub fn logdet_majorant(&self, theta: &HyperParams) -> Result<f64> {
        let psi = self.problem.dense_psi(theta)?;
        Ok(self.logdet + self.inverse.component_mul(&(psi - &self.psi)).sum())
    }

    pub fn value(&self, theta: &HyperParams) -> Result<f64> {
        let state = DenseState::new(self.problem, theta)?;
        let (prior, _) = self.problem.hyperprior_eval(theta)?;
        let majorant = self.logdet + self.inverse.component_mul(&(&state.psi - &self.psi)).sum();
        let misfit = state.resid.dot(&state.solve(&state.resid));
        let value = prior + 0.5 * majorant + 0.5 * misfit;
        if !value.is_finite() {
            return Err(Error::numerical("surrogate is not finite"));
        }
        Ok(value)
    }

    pub fn gradient(&self, theta: &HyperParams) -> Result<DVector<f64>> {
        let state = DenseState::new(self.problem, theta)?;
        let (_, mut grad) = self.problem.hyperprior_eval(theta)?;
        let r = state.solve(&state.resid);
        for j in 0..self.problem.n_params() {
            let (dpsi, dmu) = self.problem.dense_psi_derivative_with(theta, j, &state.parts)?;
            let trace = self.inverse.component_mul(&dpsi).sum();
            grad[j] += 0.5 * trace - 0.5 * r.dot(&(&dpsi * &r - dmu * 2.0));
        }
        Ok(grad)
    }
}

/// `G(θ|θ_t)` evaluated from scratch.
pub fn exact_surrogate(problem: &ProblemSpec, theta: &HyperParams, anchor: &HyperParams) -> Result<f64> {
    ExactSurrogate::new(problem, anchor)?.value(theta)
}
