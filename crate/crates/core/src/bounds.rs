//! Sample-complexity calculators and the spectral constants they consume.
//!
//! Constants estimated by sampling are empirical: α and β are attained
//! extremes over the sampled θ, and `L_Ψ` is a lower bound on the true
//! Lipschitz constant. Bounds derived from them are advisory.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{lanczos_decompose, offdiag_norms, split_seed, sym_function, SymOp, DENSE_LIMIT};
use crate::model::{HyperParams, ProblemSpec};
use crate::objective::grad_f_exact;

fn positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!("{name} must be positive and finite, got {v}")))
    }
}

fn to_count(v: f64, what: &str) -> Result<u64> {
    let c = v.ceil().max(0.0);
    if !c.is_finite() || c >= u64::MAX as f64 {
        return Err(Error::numerical(format!("{what} overflows u64 ({v:e})")));
    }
    Ok(c as u64)
}

/// `ln` of the covering-number bound: `p ln(3r/η)` for `η ≤ r`, else 0.
pub fn log_covering_number(r: f64, eta: f64, p: usize) -> Result<f64> {
    positive("r", r)?;
    if !(eta > 0.0) {
        return Err(Error::invalid(format!("η must be positive, got {eta}")));
    }
    if p == 0 {
        return Err(Error::invalid("dimension p must be >= 1"));
    }
    Ok(if eta > r { 0.0 } else { p as f64 * (3.0 * r / eta).ln() })
}

/// `ceil((3r/η)^p)` η-balls cover a radius-r ball in p dimensions; one ball
/// suffices once η exceeds r.
pub fn covering_number_bound(r: f64, eta: f64, p: usize) -> Result<u64> {
    log_covering_number(r, eta, p)?;
    if eta > r {
        return Ok(1);
    }
    let exact = (3.0 * r / eta).powi(p as i32);
    to_count(exact, "covering number")
}

/// Lanczos steps that keep SLQ within `ε/2` of Hutchinson for a matrix of
/// condition number κ: the smallest integer at least
/// `(√(κ+1)/4) ln(4ε⁻¹ m (√(κ+1)+1) ln 2κ)`, and never below 1.
pub fn lanczos_steps_bound(kappa: f64, m: usize, eps: f64) -> Result<usize> {
    if !(kappa >= 1.0) || !kappa.is_finite() {
        return Err(Error::invalid(format!("condition number must be >= 1, got {kappa}")));
    }
    positive("ε", eps)?;
    if m == 0 {
        return Err(Error::invalid("dimension m must be >= 1"));
    }
    let s = (kappa + 1.0).sqrt();
    let arg = 4.0 / eps * m as f64 * (s + 1.0) * (2.0 * kappa).ln();
    let k = s / 4.0 * arg.ln();
    Ok((to_count(k, "Lanczos step bound")? as usize).max(1))
}

/// Off-diagonal norms of `log Ψ(θ)` fed to the uniform SLQ bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum LogNorms {
    /// `α ς_F` and `α ς₂`, i.e. the largest Frobenius and spectral norms of
    /// Ψ itself.
    Surrogate,
    /// Maxima of `‖offdiag(log Ψ)‖` over audited θ.
    Audited { frobenius: f64, spectral: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpectralConstants {
    /// Lower spectral bound of Ψ over the box.
    pub alpha: f64,
    /// Upper spectral bound.
    pub beta: f64,
    pub lipschitz: f64,
    /// `max ‖Ψ‖_F / α`.
    pub varsigma_f: f64,
    /// `max ‖Ψ‖₂ / α`.
    pub varsigma_2: f64,
    /// Half-diagonal of the box.
    pub radius: f64,
    pub p: usize,
    pub m: usize,
    pub log_norms: LogNorms,
}

impl SpectralConstants {
    pub fn kappa(&self) -> f64 {
        self.beta / self.alpha
    }

    pub fn validate(&self) -> Result<()> {
        positive("α", self.alpha)?;
        positive("r", self.radius)?;
        if !(self.beta >= self.alpha) || !self.beta.is_finite() {
            return Err(Error::invalid(format!("need α <= β, got α={}, β={}", self.alpha, self.beta)));
        }
        if !(self.lipschitz >= 0.0) || !self.lipschitz.is_finite() {
            return Err(Error::invalid(format!("L_Ψ must be nonnegative, got {}", self.lipschitz)));
        }
        if !(self.varsigma_f >= 0.0 && self.varsigma_2 >= 0.0) {
            return Err(Error::invalid("ς constants must be nonnegative"));
        }
        if self.p == 0 || self.m == 0 {
            return Err(Error::invalid("p and m must be >= 1"));
        }
        if let LogNorms::Audited { frobenius, spectral } = self.log_norms {
            if !(frobenius >= 0.0 && spectral >= 0.0) {
                return Err(Error::invalid("audited norms must be nonnegative"));
            }
        }
        Ok(())
    }

    /// `(‖·‖_F, ‖·‖₂)` entering the SLQ sample bound.
    pub fn offdiag_log_norms(&self) -> (f64, f64) {
        match self.log_norms {
            LogNorms::Surrogate => (self.alpha * self.varsigma_f, self.alpha * self.varsigma_2),
            LogNorms::Audited { frobenius, spectral } => (frobenius, spectral),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SlqSampleBound {
    pub n: u64,
    /// Net radius `α ε / (5 m L_Ψ)`; infinite when `L_Ψ = 0`.
    pub eta: f64,
    pub log_gamma: f64,
}

fn probability(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v < 1.0 {
        Ok(())
    } else {
        Err(Error::invalid(format!("{name} must lie in (0, 1), got {v}")))
    }
}

/// Rademacher samples for the uniform SLQ bound `max_Θ |F̂_SL − logdet Ψ| ≤ ε`
/// with probability `1 − δ`.
pub fn slq_samples_detail(eps: f64, delta: f64, consts: &SpectralConstants) -> Result<SlqSampleBound> {
    positive("ε", eps)?;
    probability("δ", delta)?;
    consts.validate()?;
    let eta = if consts.lipschitz == 0.0 {
        f64::INFINITY
    } else {
        consts.alpha * eps / (5.0 * consts.m as f64 * consts.lipschitz)
    };
    let log_gamma = log_covering_number(consts.radius, eta, consts.p)?;
    let (fro, spec) = consts.offdiag_log_norms();
    let lead = 25.0 / 4.0 * fro * fro / (eps * eps) + 2.5 * spec / eps;
    let n = 32.0 * lead * (2f64.ln() + log_gamma - delta.ln());
    // A zero-variance family still needs one probe.
    Ok(SlqSampleBound { n: to_count(n, "SLQ sample bound")?.max(1), eta, log_gamma })
}

pub fn slq_samples_bound(eps: f64, delta: f64, consts: &SpectralConstants) -> Result<u64> {
    Ok(slq_samples_detail(eps, delta, consts)?.n)
}

/// Lanczos steps for the uniform bound: the per-θ count at `2ε/5`, with
/// `κ∞ = β/α`.
pub fn uniform_lanczos_steps(eps: f64, consts: &SpectralConstants) -> Result<usize> {
    consts.validate()?;
    lanczos_steps_bound(consts.kappa(), consts.m, 0.4 * eps)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ScheduleBound {
    pub n_t: u64,
    pub eps_t: f64,
    pub delta_t: f64,
    pub log_gamma_t: f64,
}

/// Samples at outer iteration t for M³C with `ε_t = ε₀ρᵗ`, `δ_t = δ₀ρᵗ`:
/// `16(2ς_F² + ε_t ς₂)/ε_t² · ln(2γ_t/δ_t)` with
/// `γ_t = max{(12 r m L_Ψ/(ε_t α))^p, 1}`.
pub fn m3c_schedule_detail(eps0: f64, rho: f64, delta0: f64, consts: &SpectralConstants, t: usize) -> Result<ScheduleBound> {
    positive("ε₀", eps0)?;
    probability("ρ", rho)?;
    probability("δ₀", delta0)?;
    consts.validate()?;
    let decay = rho.powi(t as i32);
    let eps_t = eps0 * decay;
    let delta_t = delta0 * decay;
    let ratio = 12.0 * consts.radius * consts.m as f64 * consts.lipschitz / (eps_t * consts.alpha);
    let log_gamma_t = if ratio > 0.0 { (consts.p as f64 * ratio.ln()).max(0.0) } else { 0.0 };
    let (sf, s2) = (consts.varsigma_f, consts.varsigma_2);
    let n = 16.0 * (2.0 * sf * sf + eps_t * s2) / (eps_t * eps_t) * (2f64.ln() + log_gamma_t - delta_t.ln());
    Ok(ScheduleBound { n_t: to_count(n, "M³C sample bound")?.max(1), eps_t, delta_t, log_gamma_t })
}

pub fn m3c_sample_schedule(eps0: f64, rho: f64, delta0: f64, consts: &SpectralConstants, t: usize) -> Result<u64> {
    Ok(m3c_schedule_detail(eps0, rho, delta0, consts, t)?.n_t)
}

/// How [`estimate_spectral_constants`] probes each Ψ(θ).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpectralMode {
    /// Dense eigendecompositions; also audits `offdiag(log Ψ)`.
    Dense,
    /// Extremal Ritz values from `steps` Lanczos iterations. Frobenius norms
    /// are bounded by `√m ‖·‖₂`.
    Lanczos { steps: usize },
}

/// Extreme eigenvalues of a symmetric operator from a Lanczos run.
fn ritz_extremes(op: &dyn SymOp, steps: usize, seed: u64) -> Result<(f64, f64)> {
    let m = op.dim();
    let v = crate::linalg::ProbeSet::rademacher(m, 1, seed)?.column(0);
    let dec = lanczos_decompose(op, &v, steps.min(m), true)?;
    let eig = SymmetricEigen::new(dec.tridiagonal()).eigenvalues;
    Ok((eig.min(), eig.max()))
}

struct Diff<'a>(&'a dyn SymOp, &'a dyn SymOp);

impl SymOp for Diff<'_> {
    fn dim(&self) -> usize {
        self.0.dim()
    }
    fn apply(&self, v: &DVector<f64>) -> DVector<f64> {
        self.0.apply(v) - self.1.apply(v)
    }
    fn matvec_count(&self) -> u64 {
        0
    }
}

/// Sample θ over the box (all corners when p ≤ 10, then `n_samples` uniform
/// draws) and record spectral extremes, norms and pairwise Lipschitz ratios.
pub fn estimate_spectral_constants(
    problem: &ProblemSpec,
    n_samples: usize,
    seed: u64,
    mode: SpectralMode,
) -> Result<SpectralConstants> {
    let bounds = problem.bounds();
    let p = bounds.dim();
    let m = problem.data_dim();
    if mode == SpectralMode::Dense && (m > DENSE_LIMIT || problem.state_dim() > DENSE_LIMIT) {
        return Err(Error::DenseLimit { dim: m.max(problem.state_dim()), limit: DENSE_LIMIT });
    }
    let mut points: Vec<DVector<f64>> = Vec::new();
    if p <= 10 {
        for mask in 0..(1usize << p) {
            points.push(DVector::from_fn(p, |j, _| if mask >> j & 1 == 1 { bounds.upper()[j] } else { bounds.lower()[j] }));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    points.extend((0..n_samples).map(|_| bounds.sample(&mut rng)));
    let params: Vec<HyperParams> = points.iter().map(|v| HyperParams::from_vector(v.clone(), problem.n_psi())).collect::<Result<_>>()?;

    let (mut alpha, mut beta, mut fro_max, mut lip) = (f64::INFINITY, 0.0_f64, 0.0_f64, 0.0_f64);
    let mut log_norms = (0.0_f64, 0.0_f64);
    match mode {
        SpectralMode::Dense => {
            let dense: Vec<DMatrix<f64>> = params.iter().map(|t| problem.dense_psi(t)).collect::<Result<_>>()?;
            for psi in &dense {
                let eig = SymmetricEigen::new(psi.clone()).eigenvalues;
                alpha = alpha.min(eig.min());
                beta = beta.max(eig.max());
                fro_max = fro_max.max(psi.norm());
                let off = offdiag_norms(&sym_function(psi, f64::ln)?);
                log_norms = (log_norms.0.max(off.frobenius), log_norms.1.max(off.spectral));
            }
            for i in 0..dense.len() {
                for j in i + 1..dense.len() {
                    let d = (&points[i] - &points[j]).norm();
                    if d > 0.0 {
                        let eig = SymmetricEigen::new(&dense[i] - &dense[j]).eigenvalues;
                        lip = lip.max(eig.amax() / d);
                    }
                }
            }
        }
        SpectralMode::Lanczos { steps } => {
            if steps == 0 {
                return Err(Error::invalid("Lanczos steps must be >= 1"));
            }
            let ops: Vec<_> = params.iter().map(|t| problem.build_psi(t)).collect::<Result<_>>()?;
            for (i, op) in ops.iter().enumerate() {
                let (lo, hi) = ritz_extremes(op, steps, split_seed(seed, i as u64))?;
                alpha = alpha.min(lo);
                beta = beta.max(hi);
                fro_max = fro_max.max((m as f64).sqrt() * hi);
            }
            for i in 0..ops.len() {
                let j = (i + 1) % ops.len();
                let d = (&points[i] - &points[j]).norm();
                if d > 0.0 {
                    let (lo, hi) = ritz_extremes(&Diff(&ops[i], &ops[j]), steps, split_seed(seed ^ 1, i as u64))?;
                    lip = lip.max(lo.abs().max(hi.abs()) / d);
                }
            }
        }
    }
    if !(alpha > 0.0) {
        return Err(Error::numerical(format!("sampled Ψ has nonpositive eigenvalue {alpha:e}")));
    }
    let consts = SpectralConstants {
        alpha,
        beta,
        lipschitz: lip,
        varsigma_f: fro_max / alpha,
        varsigma_2: beta / alpha,
        radius: bounds.radius(),
        p,
        m,
        log_norms: match mode {
            SpectralMode::Dense => LogNorms::Audited { frobenius: log_norms.0, spectral: log_norms.1 },
            SpectralMode::Lanczos { .. } => LogNorms::Surrogate,
        },
    };
    consts.validate()?;
    Ok(consts)
}

/// Empirical Lipschitz constant of ∇F: the largest
/// `‖∇F(θ) − ∇F(θ')‖ / ‖θ − θ'‖` over short random segments at sampled
/// points (and at `around`, if given). Dense problems only.
pub fn gradient_lipschitz_estimate(
    problem: &ProblemSpec,
    n_samples: usize,
    seed: u64,
    around: Option<&HyperParams>,
) -> Result<f64> {
    let bounds = problem.bounds();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers: Vec<DVector<f64>> = (0..n_samples).map(|_| bounds.sample(&mut rng)).collect();
    if let Some(t) = around {
        centers.push(t.vector().clone());
    }
    let mut best = 0.0_f64;
    for c in centers {
        let dir = DVector::from_fn(c.len(), |j, _| bounds.width(j) * (2.0 * rand::Rng::random::<f64>(&mut rng) - 1.0) * 1e-3);
        let other = bounds.project(&(&c + dir));
        let d = (&other - &c).norm();
        if d == 0.0 {
            continue;
        }
        let g0 = grad_f_exact(problem, &HyperParams::from_vector(c, problem.n_psi())?)?;
        let g1 = grad_f_exact(problem, &HyperParams::from_vector(other, problem.n_psi())?)?;
        best = best.max((g1 - g0).norm() / d);
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::noise_only_problem;
    use proptest::prelude::*;

    fn consts(lipschitz: f64) -> SpectralConstants {
        SpectralConstants {
            alpha: 1.0,
            beta: 4.0,
            lipschitz,
            varsigma_f: 20.0,
            varsigma_2: 4.0,
            radius: 1.0,
            p: 2,
            m: 50,
            log_norms: LogNorms::Surrogate,
        }
    }

    #[test]
    fn covering_numbers() {
        assert_eq!(covering_number_bound(1.0, 1.0, 3).unwrap(), 27);
        assert_eq!(covering_number_bound(2.0, 1.0, 1).unwrap(), 6);
        assert_eq!(covering_number_bound(1.0, 1.5, 4).unwrap(), 1);
        assert!(covering_number_bound(0.0, 1.0, 1).is_err());
        assert!(covering_number_bound(1.0, -1.0, 1).is_err());
        assert!(covering_number_bound(1.0, 1.0, 0).is_err());
    }

    #[test]
    fn lanczos_bound_worked_example() {
        // (√2/4) ln(40 (√2 + 1) ln 2) ≈ 1.487.
        assert_eq!(lanczos_steps_bound(1.0, 10, 1.0).unwrap(), 2);
        assert!(lanczos_steps_bound(0.5, 10, 1.0).is_err());
        assert!(lanczos_steps_bound(2.0, 10, 0.0).is_err());
    }

    #[test]
    fn zero_lipschitz_collapses_gamma() {
        let b = slq_samples_detail(0.5, 0.1, &consts(0.0)).unwrap();
        assert_eq!(b.log_gamma, 0.0);
        assert!(b.eta.is_infinite());
        let with = slq_samples_detail(0.5, 0.1, &consts(1.0)).unwrap();
        assert!(with.log_gamma > 0.0 && with.n > b.n);
    }

    #[test]
    fn zero_variance_family_still_takes_one_probe() {
        let c = SpectralConstants { log_norms: LogNorms::Audited { frobenius: 0.0, spectral: 0.0 }, varsigma_f: 0.0, varsigma_2: 0.0, ..consts(0.0) };
        assert_eq!(slq_samples_bound(0.5, 0.1, &c).unwrap(), 1);
        assert_eq!(m3c_sample_schedule(0.5, 0.5, 0.1, &c, 3).unwrap(), 1);
    }

    #[test]
    fn doubling_log_term_doubles_samples() {
        let c = consts(0.0);
        // ln(2/δ₁) = 2 ln(2/δ₀) with δ₁ = δ₀²/2.
        let d0: f64 = 0.1;
        let n0 = slq_samples_bound(0.5, d0, &c).unwrap() as f64;
        let n1 = slq_samples_bound(0.5, d0 * d0 / 2.0, &c).unwrap() as f64;
        assert!((n1 / n0 - 2.0).abs() <= 2.0 / n0);
    }

    #[test]
    fn halving_eps_quadruples_leading_term() {
        let c = SpectralConstants { log_norms: LogNorms::Audited { frobenius: 3.0, spectral: 0.0 }, ..consts(0.0) };
        let n = slq_samples_bound(0.5, 0.1, &c).unwrap();
        assert!(slq_samples_bound(0.25, 0.1, &c).unwrap() >= 4 * n - 4);
    }

    #[test]
    fn bad_probabilities_are_rejected() {
        assert!(slq_samples_bound(0.5, 1.0, &consts(0.0)).is_err());
        assert!(m3c_sample_schedule(0.5, 1.0, 0.05, &consts(1.0), 0).is_err());
        assert!(m3c_sample_schedule(0.5, 0.5, 0.0, &consts(1.0), 0).is_err());
    }

    #[test]
    fn schedule_grows_and_matches_dominant_term() {
        let c = consts(1.0);
        assert!(m3c_sample_schedule(1.0, 0.8, 0.02, &c, 5).unwrap() > m3c_sample_schedule(1.0, 0.8, 0.02, &c, 0).unwrap());
        let d = m3c_schedule_detail(1.0, 0.8, 0.02, &c, 3).unwrap();
        assert!(d.eps_t * c.varsigma_2 <= 0.1 * c.varsigma_f.powi(2));
        let approx = 32.0 * c.varsigma_f.powi(2) / d.eps_t.powi(2) * (2f64.ln() + d.log_gamma_t - d.delta_t.ln());
        assert!((d.n_t as f64 / approx - 1.0).abs() <= 0.1);
    }

    #[test]
    fn scalar_family_constants_are_exact() {
        // Ψ(θ) = θ I on [1, 2].
        let p = noise_only_problem(DMatrix::zeros(4, 1), DMatrix::identity(1, 1), DVector::zeros(4), 1.0, 2.0).unwrap();
        for mode in [SpectralMode::Dense, SpectralMode::Lanczos { steps: 3 }] {
            let c = estimate_spectral_constants(&p, 5, 1, mode).unwrap();
            assert!((c.alpha - 1.0).abs() <= 1e-12 && (c.beta - 2.0).abs() <= 1e-12);
            assert!((c.lipschitz - 1.0).abs() <= 1e-12, "{mode:?}: {}", c.lipschitz);
            assert!(c.varsigma_2 <= c.varsigma_f + 1e-12 && c.varsigma_f <= 2.0 * c.varsigma_2 + 1e-12);
        }
    }

    #[test]
    fn fixed_operator_has_zero_lipschitz() {
        use crate::model::{FixedCov, FixedForward, HyperPrior, ParamBox, ProblemParts, Scale, ScaledIdentityNoise};
        use std::sync::Arc;
        let p = ProblemSpec::new(ProblemParts {
            name: "fixed".into(),
            forward: Arc::new(FixedForward(Arc::new(DMatrix::<f64>::identity(3, 3)))),
            prior_cov: Arc::new(FixedCov(Arc::new(DMatrix::identity(3, 3)))),
            noise: Arc::new(ScaledIdentityNoise { dim: 3, scale: Scale::Fixed(0.5) }),
            n_psi: 1,
            prior_mean: DVector::zeros(3),
            data: DVector::zeros(3),
            hyperprior: HyperPrior::flat(1),
            bounds: ParamBox::new(vec![0.0], vec![1.0]).unwrap(),
            x_true: None,
            theta_true: None,
        })
        .unwrap();
        let c = estimate_spectral_constants(&p, 4, 2, SpectralMode::Dense).unwrap();
        assert_eq!(c.lipschitz, 0.0);
        assert!((c.alpha - 1.5).abs() <= 1e-12);
        assert_eq!(slq_samples_detail(0.5, 0.1, &c).unwrap().log_gamma, 0.0);
    }

    proptest! {
        #[test]
        fn bounds_are_monotone(eps in 0.01..2.0f64, delta in 0.001..0.5f64, kappa in 1.0..1e4f64, m in 1usize..500, lip in 0.0..3.0f64) {
            let c = SpectralConstants { lipschitz: lip, m, ..consts(0.0) };
            prop_assert!(lanczos_steps_bound(kappa, m, eps / 2.0).unwrap() >= lanczos_steps_bound(kappa, m, eps).unwrap());
            let n = slq_samples_bound(eps, delta, &c).unwrap();
            prop_assert!(slq_samples_bound(eps / 2.0, delta, &c).unwrap() >= 2 * n - 2);
            prop_assert!(slq_samples_bound(eps, delta / 2.0, &c).unwrap() >= n);
            let t = m3c_sample_schedule(eps, 0.7, delta, &c, 1).unwrap();
            prop_assert!(m3c_sample_schedule(eps, 0.7, delta, &c, 2).unwrap() >= t);
            prop_assert!(m3c_sample_schedule(eps, 0.7, delta / 2.0, &c, 1).unwrap() >= t);
        }
    }
}
