//! `sample-size`: Lanczos steps and probe counts from the concentration
//! bounds.

use serde::Serialize;

use hypermarg_core::bounds::{
    estimate_spectral_constants, m3c_schedule_detail, slq_samples_detail, uniform_lanczos_steps, SpectralConstants, SpectralMode,
};
use hypermarg_core::linalg::DENSE_LIMIT;
use hypermarg_core::model::{make_test_problem, TestProblem};

use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SampleSizeInputs {
    pub eps: f64,
    pub delta: f64,
    /// Decay of `ε_t` and `δ_t` for the M³C schedule; omitted means no
    /// schedule.
    pub rho: Option<f64>,
    pub t: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SampleSizeReport {
    pub inputs: SampleSizeInputs,
    pub source: String,
    pub constants: SpectralConstants,
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(rename = "N")]
    pub n: u64,
    /// `null` when `L_Ψ = 0`.
    pub eta: f64,
    pub gamma: f64,
    pub log_gamma: f64,
    #[serde(rename = "N_t")]
    pub n_t: Option<u64>,
    pub eps_t: Option<f64>,
    pub delta_t: Option<f64>,
    pub gamma_t: Option<f64>,
    pub log_gamma_t: Option<f64>,
}

/// Estimate constants for a built-in problem by sampling its box.
pub fn problem_constants(problem: &TestProblem, samples: usize, seed: u64) -> Result<SpectralConstants> {
    let spec = make_test_problem(problem)?;
    let mode = if spec.data_dim() <= DENSE_LIMIT && spec.state_dim() <= DENSE_LIMIT {
        SpectralMode::Dense
    } else {
        SpectralMode::Lanczos { steps: 60 }
    };
    Ok(estimate_spectral_constants(&spec, samples, seed, mode)?)
}

pub fn sample_size(inputs: SampleSizeInputs, consts: SpectralConstants, source: String) -> Result<SampleSizeReport> {
    let slq = slq_samples_detail(inputs.eps, inputs.delta, &consts)?;
    let k = uniform_lanczos_steps(inputs.eps, &consts)?;
    let sched = inputs.rho.map(|rho| m3c_schedule_detail(inputs.eps, rho, inputs.delta, &consts, inputs.t)).transpose()?;
    Ok(SampleSizeReport {
        inputs,
        source,
        constants: consts,
        k,
        n: slq.n,
        eta: slq.eta,
        gamma: slq.log_gamma.exp(),
        log_gamma: slq.log_gamma,
        n_t: sched.map(|s| s.n_t),
        eps_t: sched.map(|s| s.eps_t),
        delta_t: sched.map(|s| s.delta_t),
        gamma_t: sched.map(|s| s.log_gamma_t.exp()),
        log_gamma_t: sched.map(|s| s.log_gamma_t),
    })
}
