//! Randomized Nyström preconditioner for operators of the form
//! `μ I + (low-rank SPD)`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::op::{Counter, SymOp};
use crate::error::{Error, Result};

/// SPD approximation `P ≈ op` with a factor `G` such that `GᵀG = P⁻¹`.
pub trait Preconditioner: Send + Sync {
    fn dim(&self) -> usize;
    /// `P⁻¹ v`.
    fn apply_inverse(&self, v: &DVector<f64>) -> DVector<f64>;
    /// `G v`.
    fn apply_factor(&self, v: &DVector<f64>) -> DVector<f64>;
    /// `Gᵀ v`.
    fn apply_factor_t(&self, v: &DVector<f64>) -> DVector<f64>;
    /// `log det P`.
    fn logdet(&self) -> f64;
}

/// `P = I`.
#[derive(Debug, Clone, Copy)]
pub struct IdentityPreconditioner(pub usize);

impl Preconditioner for IdentityPreconditioner {
    fn dim(&self) -> usize {
        self.0
    }
    fn apply_inverse(&self, v: &DVector<f64>) -> DVector<f64> {
        v.clone()
    }
    fn apply_factor(&self, v: &DVector<f64>) -> DVector<f64> {
        v.clone()
    }
    fn apply_factor_t(&self, v: &DVector<f64>) -> DVector<f64> {
        v.clone()
    }
    fn logdet(&self) -> f64 {
        0.0
    }
}

/// `P = U(Λ + μI)Uᵀ + μ(I − UUᵀ)`, optionally congruence-scaled as `D P D`
/// for a positive diagonal `D`.
#[derive(Debug, Clone)]
pub struct NystromPreconditioner {
    u: DMatrix<f64>,
    lambda: DVector<f64>,
    shift: f64,
    rank: usize,
    scale: Option<DVector<f64>>,
}

impl NystromPreconditioner {
    pub fn shift(&self) -> f64 {
        self.shift
    }

    /// Requested sketch rank ℓ.
    pub fn rank(&self) -> usize {
        self.rank
    }

    /// Retained eigenvalues Λ of the low-rank part.
    pub fn eigenvalues(&self) -> &DVector<f64> {
        &self.lambda
    }

    /// `U diag(g(λᵢ+μ)) Uᵀ v + g(μ)(v − UUᵀv)` for the unscaled part.
    fn spectral_apply(&self, v: &DVector<f64>, g: impl Fn(f64) -> f64) -> DVector<f64> {
        if self.u.ncols() == 0 {
            return v * g(self.shift);
        }
        let c = self.u.tr_mul(v);
        let gm = g(self.shift);
        let scaled = DVector::from_fn(c.len(), |i, _| c[i] * (g(self.lambda[i] + self.shift) - gm));
        &self.u * scaled + v * gm
    }

    /// `P̃^{-1/2} v` of the unscaled approximation; with no scaling this is
    /// the symmetric inverse square root of `P`.
    pub fn apply_inverse_sqrt(&self, v: &DVector<f64>) -> DVector<f64> {
        self.spectral_apply(v, |x| 1.0 / x.sqrt())
    }

    /// Congruence-scale: `P ← D P D`.
    pub fn with_scale(mut self, d: DVector<f64>) -> Result<Self> {
        if d.len() != self.dim() || d.iter().any(|&x| !(x > 0.0) || !x.is_finite()) {
            return Err(Error::invalid("preconditioner scale must be a positive vector of matching length"));
        }
        self.scale = Some(d);
        Ok(self)
    }
}

impl Preconditioner for NystromPreconditioner {
    fn dim(&self) -> usize {
        self.u.nrows()
    }

    fn apply_inverse(&self, v: &DVector<f64>) -> DVector<f64> {
        match &self.scale {
            None => self.spectral_apply(v, |x| 1.0 / x),
            Some(d) => {
                let inner = self.spectral_apply(&v.component_div(d), |x| 1.0 / x);
                inner.component_div(d)
            }
        }
    }

    fn apply_factor(&self, v: &DVector<f64>) -> DVector<f64> {
        match &self.scale {
            None => self.apply_inverse_sqrt(v),
            Some(d) => self.apply_inverse_sqrt(&v.component_div(d)),
        }
    }

    fn apply_factor_t(&self, v: &DVector<f64>) -> DVector<f64> {
        match &self.scale {
            None => self.apply_inverse_sqrt(v),
            Some(d) => self.apply_inverse_sqrt(v).component_div(d),
        }
    }

    fn logdet(&self) -> f64 {
        let m = self.dim();
        let low: f64 = self.lambda.iter().map(|l| (l + self.shift).ln()).sum();
        let rest = (m - self.lambda.len()) as f64 * self.shift.ln();
        let scale = self.scale.as_ref().map_or(0.0, |d| 2.0 * d.iter().map(|x| x.ln()).sum::<f64>());
        low + rest + scale
    }
}

/// Build a rank-ℓ Nyström approximation of `op − μI` from a Gaussian sketch.
/// Consumes exactly ℓ matvecs of `op`.
pub fn nystrom_preconditioner(
    op: &dyn SymOp,
    shift: f64,
    rank: usize,
    seed: u64,
) -> Result<NystromPreconditioner> {
    let m = op.dim();
    if !(shift > 0.0) || !shift.is_finite() {
        return Err(Error::invalid(format!("Nyström shift must be positive, got {shift}")));
    }
    if rank == 0 || rank >= m {
        return Err(Error::invalid(format!("sketch rank must satisfy 1 <= l < m, got l={rank}, m={m}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let omega = DMatrix::from_fn(m, rank, |_, _| StandardNormal.sample(&mut rng));
    let q = omega.qr().q();

    let mut y = DMatrix::zeros(m, rank);
    for j in 0..rank {
        let qj = q.column(j).into_owned();
        let mut col = op.apply(&qj);
        col.axpy(-shift, &qj, 1.0);
        y.set_column(j, &col);
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::numerical("non-finite sketch in Nyström construction"));
    }

    let core = q.tr_mul(&y);
    let core = (&core + core.transpose()) * 0.5;
    let eig = SymmetricEigen::new(core);
    let top = eig.eigenvalues.iter().fold(0.0_f64, |a, &v| a.max(v));
    let keep: Vec<usize> = (0..rank).filter(|&i| eig.eigenvalues[i] > 1e-12 * top.max(f64::MIN_POSITIVE)).collect();

    let (u, lambda) = if keep.is_empty() || top <= 0.0 {
        (DMatrix::zeros(m, 0), DVector::zeros(0))
    } else {
        let mut f = DMatrix::zeros(m, keep.len());
        for (c, &i) in keep.iter().enumerate() {
            let v = eig.eigenvectors.column(i);
            f.set_column(c, &((&y * v) / eig.eigenvalues[i].sqrt()));
        }
        let svd = f.svd(true, false);
        let u_full = svd.u.ok_or_else(|| Error::numerical("SVD failed in Nyström construction"))?;
        let kept: Vec<usize> = (0..svd.singular_values.len())
            .filter(|&i| svd.singular_values[i] > 1e-10 * svd.singular_values.max())
            .collect();
        let u = DMatrix::from_columns(&kept.iter().map(|&i| u_full.column(i).into_owned()).collect::<Vec<_>>());
        let lambda = DVector::from_iterator(kept.len(), kept.iter().map(|&i| svd.singular_values[i].powi(2)));
        (u, lambda)
    };
    let u = if u.ncols() == 0 { DMatrix::zeros(m, 0) } else { u };
    Ok(NystromPreconditioner { u, lambda, shift, rank, scale: None })
}

/// `D⁻¹ op D⁻¹` for a positive diagonal `D`; matvecs are counted.
pub struct WhitenedOp<'a> {
    inner: &'a dyn SymOp,
    d: DVector<f64>,
    counter: Counter,
}

impl<'a> WhitenedOp<'a> {
    pub fn new(inner: &'a dyn SymOp, d: DVector<f64>) -> Result<Self> {
        if d.len() != inner.dim() || d.iter().any(|&x| !(x > 0.0)) {
            return Err(Error::invalid("whitening diagonal must be positive with matching length"));
        }
        Ok(Self { inner, d, counter: Counter::new() })
    }
}

impl SymOp for WhitenedOp<'_> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }
    fn apply(&self, v: &DVector<f64>) -> DVector<f64> {
        self.counter.incr();
        self.inner.apply(&v.component_div(&self.d)).component_div(&self.d)
    }
    fn matvec_count(&self) -> u64 {
        self.counter.get()
    }
}

/// `G op Gᵀ` for a preconditioner factor `G`.
pub struct PreconditionedOp<'a> {
    inner: &'a dyn SymOp,
    pre: &'a dyn Preconditioner,
    counter: Counter,
}

impl<'a> PreconditionedOp<'a> {
    pub fn new(inner: &'a dyn SymOp, pre: &'a dyn Preconditioner) -> Result<Self> {
        if inner.dim() != pre.dim() {
            return Err(Error::invalid("preconditioner dimension mismatch"));
        }
        Ok(Self { inner, pre, counter: Counter::new() })
    }
}

impl SymOp for PreconditionedOp<'_> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }
    fn apply(&self, v: &DVector<f64>) -> DVector<f64> {
        self.counter.incr();
        self.pre.apply_factor(&self.inner.apply(&self.pre.apply_factor_t(v)))
    }
    fn matvec_count(&self) -> u64 {
        self.counter.get()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{dense_logdet, pcg_solve, random_spd, DenseSymOp, PcgOptions};
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn dense_of(p: &dyn Preconditioner, f: impl Fn(&dyn Preconditioner, &DVector<f64>) -> DVector<f64>) -> DMatrix<f64> {
        let m = p.dim();
        DMatrix::from_columns(&(0..m).map(|j| f(p, &DVector::from_fn(m, |i, _| if i == j { 1.0 } else { 0.0 }))).collect::<Vec<_>>())
    }

    #[test]
    fn scaled_identity_gives_exact_inverse() {
        let mu = 2.5;
        let op = DenseSymOp::new(DMatrix::from_diagonal_element(12, 12, mu)).unwrap();
        for rank in [1, 4, 11] {
            let p = nystrom_preconditioner(&op, mu, rank, 1).unwrap();
            let v = DVector::from_fn(12, |i, _| i as f64 - 3.0);
            assert!((p.apply_inverse(&v) - &v / mu).amax() <= 1e-10);
            assert_relative_eq!(p.logdet(), 12.0 * mu.ln(), epsilon = 1e-10);
        }
    }

    #[test]
    fn rank_one_update_needs_two_pcg_iterations() {
        let m = 40;
        let mu = 0.7;
        let u = DVector::from_fn(m, |i, _| ((i + 1) as f64).sqrt());
        let a = DMatrix::from_diagonal_element(m, m, mu) + &u * u.transpose();
        let op = DenseSymOp::new(a).unwrap();
        let p = nystrom_preconditioner(&op, mu, 3, 9).unwrap();
        let b = DVector::from_fn(m, |i, _| (i as f64 * 1.3).sin());
        let out = pcg_solve(&op, &b, Some(&p), &PcgOptions { tol: 1e-10, max_iter: 50 }).unwrap();
        assert!(out.converged && out.iterations <= 2, "{} iterations", out.iterations);
    }

    #[test]
    fn logdet_of_diagonal_example() {
        let op = DenseSymOp::from_diagonal(&[3.0, 3.0, 1.0, 1.0]);
        let p = nystrom_preconditioner(&op, 1.0, 2, 5).unwrap();
        assert_relative_eq!(p.logdet(), 2.0 * 3f64.ln(), epsilon = 1e-10);
        let dense_p = dense_of(&p, |p, v| p.apply_inverse(v)).try_inverse().unwrap();
        assert_relative_eq!(dense_logdet(&dense_p).unwrap(), p.logdet(), epsilon = 1e-10);
    }

    #[test]
    fn invalid_shift_and_rank() {
        let op = DenseSymOp::identity(5);
        assert!(matches!(nystrom_preconditioner(&op, 0.0, 2, 1), Err(Error::InvalidArgument(_))));
        assert!(matches!(nystrom_preconditioner(&op, -1.0, 2, 1), Err(Error::InvalidArgument(_))));
        assert!(matches!(nystrom_preconditioner(&op, 1.0, 5, 1), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn sketch_consumes_rank_matvecs() {
        let op = DenseSymOp::new(random_spd(20, 10.0, 1.0, 1).unwrap()).unwrap();
        nystrom_preconditioner(&op, 1.0, 6, 2).unwrap();
        assert_eq!(op.matvec_count(), 6);
    }

    #[test]
    fn scaled_factor_reproduces_inverse() {
        let m = 15;
        let a = random_spd(m, 30.0, 1.0, 4).unwrap();
        let d = DVector::from_fn(m, |i, _| 0.5 + i as f64 * 0.1);
        let base = DenseSymOp::new(a).unwrap();
        let white = WhitenedOp::new(&base, d.clone()).unwrap();
        let p = nystrom_preconditioner(&white, 1.0, 5, 3).unwrap().with_scale(d).unwrap();
        let g = dense_of(&p, |p, v| p.apply_factor(v));
        let gt = dense_of(&p, |p, v| p.apply_factor_t(v));
        let inv = dense_of(&p, |p, v| p.apply_inverse(v));
        assert!((&gt - g.transpose()).amax() <= 1e-12);
        assert!((gt * &g - &inv).amax() <= 1e-10 * inv.amax());
        let pmat = inv.try_inverse().unwrap();
        assert_relative_eq!(dense_logdet(&pmat).unwrap(), p.logdet(), max_relative = 1e-9);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn inverse_is_spd_and_sqrt_composes(m in 6usize..30, seed in any::<u64>(), rank_frac in 0.1f64..0.9) {
            let rank = ((m as f64 * rank_frac) as usize).clamp(1, m - 1);
            let op = DenseSymOp::new(random_spd(m, 50.0, 1.0, seed).unwrap()).unwrap();
            let p = nystrom_preconditioner(&op, 1.0, rank, seed ^ 1).unwrap();
            let v = DVector::from_fn(m, |i, _| ((i as u64 ^ seed) % 7) as f64 - 3.0 + 0.5);
            prop_assert!(v.dot(&p.apply_inverse(&v)) > 0.0);
            let twice = p.apply_inverse_sqrt(&p.apply_inverse_sqrt(&v));
            let once = p.apply_inverse(&v);
            prop_assert!((&twice - &once).norm() <= 1e-8 * once.norm());
        }
    }
}
