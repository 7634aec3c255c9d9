//! Symmetric Lanczos with optional full reorthogonalization, and the
//! Gauss-quadrature functionals built on it.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use super::op::SymOp;
use crate::error::{Error, Result};

/// Relative breakdown threshold on the off-diagonal coefficients.
pub const BREAKDOWN_TOL: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct LanczosDecomp {
    /// Orthonormal Krylov basis, one vector per completed step.
    pub basis: Vec<DVector<f64>>,
    /// Diagonal of T.
    pub alpha: Vec<f64>,
    /// Off-diagonal of T (length `alpha.len() - 1`).
    pub beta: Vec<f64>,
    /// Step (1-based) at which the recurrence broke down, if it did.
    pub breakdown_step: Option<usize>,
    /// Norm of the start vector.
    pub start_norm: f64,
}

impl LanczosDecomp {
    pub fn steps(&self) -> usize {
        self.alpha.len()
    }

    pub fn tridiagonal(&self) -> DMatrix<f64> {
        let k = self.steps();
        let mut t = DMatrix::zeros(k, k);
        for i in 0..k {
            t[(i, i)] = self.alpha[i];
        }
        for (i, &b) in self.beta.iter().enumerate() {
            t[(i, i + 1)] = b;
            t[(i + 1, i)] = b;
        }
        t
    }

    pub fn basis_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_columns(&self.basis)
    }

    /// Ritz values and eigenvectors of T. Fails if any Ritz value is not
    /// strictly positive.
    fn positive_ritz(&self) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
        let eig = SymmetricEigen::new(self.tridiagonal());
        if let Some(bad) = eig.eigenvalues.iter().find(|&&v| !(v > 0.0)) {
            return Err(Error::numerical(format!(
                "tridiagonal matrix not positive definite: Ritz value {bad:e}"
            )));
        }
        Ok(eig)
    }
}

/// Run `k` steps of symmetric Lanczos on `op` from `v`.
pub fn lanczos_decompose(
    op: &dyn SymOp,
    v: &DVector<f64>,
    k: usize,
    reorth: bool,
) -> Result<LanczosDecomp> {
    let m = op.dim();
    if v.len() != m {
        return Err(Error::invalid(format!("start vector has length {}, operator dimension {m}", v.len())));
    }
    if k == 0 || k > m {
        return Err(Error::invalid(format!("Lanczos steps must satisfy 1 <= K <= m, got K={k}, m={m}")));
    }
    let start_norm = v.norm();
    if !(start_norm > 0.0) || !start_norm.is_finite() {
        return Err(Error::invalid("Lanczos start vector must be nonzero and finite"));
    }

    let mut basis: Vec<DVector<f64>> = Vec::with_capacity(k);
    let mut alpha = Vec::with_capacity(k);
    let mut beta: Vec<f64> = Vec::with_capacity(k);
    let mut breakdown_step = None;
    let mut norm_est = 0.0_f64;

    // The matvec is applied to the unnormalized vector and α is formed as a
    // Rayleigh quotient, which keeps scaled identities exact.
    let mut raw = v.clone();
    let mut raw_norm = start_norm;
    basis.push(v / start_norm);
    for j in 0..k {
        let q = &basis[j];
        let mraw = op.apply(&raw);
        let a = raw.dot(&mraw) / raw.dot(&raw);
        let mut w = mraw / raw_norm;
        w.axpy(-a, q, 1.0);
        let b_prev = if j > 0 { beta[j - 1] } else { 0.0 };
        if j > 0 {
            w.axpy(-b_prev, &basis[j - 1], 1.0);
        }
        if reorth {
            // One modified Gram-Schmidt sweep against the whole basis.
            for qi in &basis {
                let c = qi.dot(&w);
                w.axpy(-c, qi, 1.0);
            }
        }
        if !a.is_finite() || w.iter().any(|x| !x.is_finite()) {
            return Err(Error::numerical(format!("non-finite value in Lanczos step {}", j + 1)));
        }
        alpha.push(a);
        let b = w.norm();
        norm_est = norm_est.max(a.abs() + b + b_prev);
        if j + 1 == k {
            break;
        }
        if b <= BREAKDOWN_TOL * norm_est {
            breakdown_step = Some(j + 1);
            break;
        }
        beta.push(b);
        basis.push(&w / b);
        raw = w;
        raw_norm = b;
    }

    Ok(LanczosDecomp { basis, alpha, beta, breakdown_step, start_norm })
}

/// `√(a² + b²)` without `hypot`'s cost unless the squares under- or
/// overflow.
fn pythag(a: f64, b: f64) -> f64 {
    let r = (a * a + b * b).sqrt();
    if r.is_finite() && r > 1e-150 {
        r
    } else {
        a.hypot(b)
    }
}

/// Nodes and weights of the Gauss rule encoded by a symmetric tridiagonal
/// matrix: its eigenvalues and the squared first components of its
/// eigenvectors. Implicit QL with Wilkinson shifts, rotating only the first
/// row of the eigenvector matrix, so the cost is O(K²).
pub fn gauss_rule(alpha: &[f64], beta: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = alpha.len();
    if n == 0 || beta.len() + 1 != n {
        return Err(Error::invalid(format!("tridiagonal needs k >= 1 diagonal and k - 1 off-diagonal entries, got {n} and {}", beta.len())));
    }
    let mut d = alpha.to_vec();
    let mut e: Vec<f64> = beta.iter().copied().chain(std::iter::once(0.0)).collect();
    let mut z = vec![0.0; n];
    z[0] = 1.0;
    for l in 0..n {
        let mut iter = 0;
        loop {
            let mut m = l;
            while m + 1 < n {
                let dd = d[m].abs() + d[m + 1].abs();
                if e[m].abs() <= f64::EPSILON * dd {
                    break;
                }
                m += 1;
            }
            if m == l {
                break;
            }
            iter += 1;
            if iter > 60 {
                return Err(Error::numerical("tridiagonal QL iteration did not converge"));
            }
            let mut g = (d[l + 1] - d[l]) / (2.0 * e[l]);
            let mut r = pythag(g, 1.0);
            g = d[m] - d[l] + e[l] / (g + r.copysign(g));
            let (mut s, mut c, mut p) = (1.0, 1.0, 0.0);
            let mut underflow = false;
            for i in (l..m).rev() {
                let f = s * e[i];
                let b = c * e[i];
                r = pythag(f, g);
                e[i + 1] = r;
                if r == 0.0 {
                    d[i + 1] -= p;
                    e[m] = 0.0;
                    underflow = true;
                    break;
                }
                s = f / r;
                c = g / r;
                g = d[i + 1] - p;
                r = (d[i] - g) * s + 2.0 * c * b;
                p = s * r;
                d[i + 1] = g + p;
                g = c * r - b;
                let zf = z[i + 1];
                z[i + 1] = s * z[i] + c * zf;
                z[i] = c * z[i] - s * zf;
            }
            if underflow {
                continue;
            }
            d[l] -= p;
            e[l] = g;
            e[m] = 0.0;
        }
    }
    if d.iter().chain(z.iter()).any(|v| !v.is_finite()) {
        return Err(Error::numerical("non-finite Gauss rule"));
    }
    Ok((d, z.into_iter().map(|v| v * v).collect()))
}

/// Gauss quadrature `‖w‖² e₁ᵀ f(T_K) e₁ ≈ wᵀ f(op) w`.
pub fn lanczos_quadform(
    op: &dyn SymOp,
    w: &DVector<f64>,
    k: usize,
    f: impl Fn(f64) -> f64,
) -> Result<f64> {
    let dec = lanczos_decompose(op, w, k, true)?;
    let (nodes, weights) = gauss_rule(&dec.alpha, &dec.beta)?;
    if let Some(bad) = nodes.iter().find(|&&v| !(v > 0.0)) {
        return Err(Error::numerical(format!("tridiagonal matrix not positive definite: Ritz value {bad:e}")));
    }
    let acc: f64 = nodes.iter().zip(&weights).map(|(&t, &w)| w * f(t)).sum();
    Ok(dec.start_norm * dec.start_norm * acc)
}

/// SLQ quadratic form `wᵀ log(op) w`.
pub fn lanczos_quadform_log(op: &dyn SymOp, w: &DVector<f64>, k: usize) -> Result<f64> {
    lanczos_quadform(op, w, k, f64::ln)
}

/// `op^{-1/2} w ≈ ‖w‖ V_K T_K^{-1/2} e₁`.
pub fn lanczos_inv_sqrt_apply(op: &dyn SymOp, w: &DVector<f64>, k: usize) -> Result<DVector<f64>> {
    let dec = lanczos_decompose(op, w, k, true)?;
    let eig = dec.positive_ritz()?;
    let steps = dec.steps();
    let mut coeff = DVector::zeros(steps);
    for (i, &theta) in eig.eigenvalues.iter().enumerate() {
        let tau = eig.eigenvectors[(0, i)];
        coeff.axpy(tau / theta.sqrt(), &eig.eigenvectors.column(i), 1.0);
    }
    let mut out = DVector::zeros(op.dim());
    for (qi, c) in dec.basis.iter().zip(coeff.iter()) {
        out.axpy(*c, qi, 1.0);
    }
    Ok(out * dec.start_norm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{random_spd, sym_function, DenseSymOp};
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn ones(m: usize) -> DVector<f64> {
        DVector::from_element(m, 1.0)
    }

    #[test]
    fn identity_breaks_down_after_first_step() {
        let op = DenseSymOp::identity(6);
        let v = DVector::from_vec(vec![1.0, -2.0, 0.5, 3.0, 0.0, 1.0]);
        let dec = lanczos_decompose(&op, &v, 3, true).unwrap();
        assert_eq!(dec.breakdown_step, Some(1));
        assert_eq!(dec.tridiagonal(), DMatrix::identity(1, 1));
        assert_eq!(op.matvec_count(), 1);
    }

    #[test]
    fn diagonal_spectrum_is_recovered() {
        let op = DenseSymOp::from_diagonal(&[1.0, 2.0, 3.0, 4.0]);
        let dec = lanczos_decompose(&op, &(ones(4) * 0.5), 4, true).unwrap();
        let mut ev: Vec<f64> = SymmetricEigen::new(dec.tridiagonal()).eigenvalues.iter().copied().collect();
        ev.sort_by(|a, b| a.partial_cmp(b).unwrap());
        for (got, want) in ev.iter().zip([1.0, 2.0, 3.0, 4.0]) {
            assert!((got - want).abs() <= 1e-10, "{got} vs {want}");
        }
        assert_eq!(op.matvec_count(), 4);
    }

    #[test]
    fn reorthogonalization_preserves_orthogonality() {
        let m = 50;
        let a = random_spd(m, 1e8, 1.0, 17).unwrap();
        let op = DenseSymOp::new(a.clone()).unwrap();
        let v = DVector::from_fn(m, |i, _| 1.0 + (i as f64).sin());
        let on = lanczos_decompose(&op, &v, m, true).unwrap();
        let vm = on.basis_matrix();
        let k = vm.ncols();
        let err = (vm.transpose() * &vm - DMatrix::identity(k, k)).abs().max();
        assert!(err <= 1e-8, "reorth on: {err}");

        let t_err = (vm.transpose() * &a * &vm - on.tridiagonal()).norm() / a.norm();
        assert!(t_err <= 1e-8, "projection error {t_err}");

        let off = lanczos_decompose(&op, &v, m, false).unwrap();
        let vo = off.basis_matrix();
        let ko = vo.ncols();
        let err_off = (vo.transpose() * &vo - DMatrix::identity(ko, ko)).abs().max();
        assert!(err_off > err, "plain Lanczos should lose orthogonality ({err_off})");
    }

    #[test]
    fn quadform_log_trivial_spectra() {
        let w = DVector::from_vec(vec![1.0, -1.0, 2.0]);
        assert_eq!(lanczos_quadform_log(&DenseSymOp::identity(3), &w, 2).unwrap(), 0.0);
        let op = DenseSymOp::new(DMatrix::from_diagonal_element(8, 8, 2.0)).unwrap();
        let q = lanczos_quadform_log(&op, &ones(8), 3).unwrap();
        assert!((q - 8.0 * 2f64.ln()).abs() <= 1e-12);
    }

    #[test]
    fn quadform_log_matches_dense_oracle() {
        let a = random_spd(30, 80.0, 1.0, 5).unwrap();
        let w = DVector::from_fn(30, |i, _| if i % 3 == 0 { 1.0 } else { -1.0 });
        let oracle = w.dot(&(sym_function(&a, f64::ln).unwrap() * &w));
        let got = lanczos_quadform_log(&DenseSymOp::new(a).unwrap(), &w, 30).unwrap();
        assert!((got - oracle).abs() <= 1e-8 * oracle.abs().max(1.0), "{got} vs {oracle}");
    }

    #[test]
    fn indefinite_operator_reports_ritz_value() {
        let op = DenseSymOp::from_diagonal(&[1.0, -2.0]);
        let err = lanczos_quadform_log(&op, &ones(2), 2).unwrap_err();
        match err {
            Error::NumericalFailure(msg) => assert!(msg.contains("Ritz value"), "{msg}"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn bad_arguments_are_rejected() {
        let op = DenseSymOp::identity(3);
        assert!(matches!(lanczos_decompose(&op, &DVector::zeros(3), 2, true), Err(Error::InvalidArgument(_))));
        assert!(matches!(lanczos_decompose(&op, &ones(3), 4, true), Err(Error::InvalidArgument(_))));
        assert!(matches!(lanczos_decompose(&op, &ones(3), 0, true), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn inv_sqrt_trivial_and_dense() {
        let w = DVector::from_vec(vec![3.0, -1.0, 2.0, 0.5]);
        assert_eq!(lanczos_inv_sqrt_apply(&DenseSymOp::identity(4), &w, 3).unwrap(), w);
        let four = DenseSymOp::new(DMatrix::from_diagonal_element(4, 4, 4.0)).unwrap();
        let half = lanczos_inv_sqrt_apply(&four, &w, 2).unwrap();
        assert!((half - &w * 0.5).amax() <= 1e-12);

        let a = random_spd(20, 30.0, 1.0, 8).unwrap();
        let w = DVector::from_fn(20, |i, _| (i as f64 * 0.7).cos());
        let oracle = sym_function(&a, |x| 1.0 / x.sqrt()).unwrap() * &w;
        let got = lanczos_inv_sqrt_apply(&DenseSymOp::new(a).unwrap(), &w, 20).unwrap();
        assert!((&got - &oracle).norm() <= 1e-8 * oracle.norm());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn slq_equals_dense_when_k_is_full(m in 2usize..=40, seed in any::<u64>(), kappa in 1.5f64..100.0) {
            let a = random_spd(m, kappa, 1.0, seed).unwrap();
            let w = DVector::from_fn(m, |i, _| if (seed >> (i % 60)) & 1 == 0 { 1.0 } else { -1.0 });
            let oracle = w.dot(&(sym_function(&a, f64::ln).unwrap() * &w));
            let got = lanczos_quadform_log(&DenseSymOp::new(a).unwrap(), &w, m).unwrap();
            prop_assert!((got - oracle).abs() <= 1e-8 * oracle.abs().max(1.0), "{} vs {}", got, oracle);
        }

        #[test]
        fn tridiagonal_has_positive_offdiagonals(m in 2usize..30, seed in any::<u64>()) {
            let a = random_spd(m, 20.0, 1.0, seed).unwrap();
            let dec = lanczos_decompose(&DenseSymOp::new(a).unwrap(), &DVector::from_element(m, 1.0), m, true).unwrap();
            prop_assert!(dec.beta.iter().all(|&b| b > 0.0));
            let t = dec.tridiagonal();
            prop_assert_eq!(t.clone(), t.transpose());
        }

        #[test]
        fn gauss_rule_matches_dense_eigensolver(
            alpha in proptest::collection::vec(-5.0f64..5.0, 1..30),
            scale in 1e-3f64..10.0,
            seed in any::<u64>(),
        ) {
            let k = alpha.len();
            let beta: Vec<f64> = (0..k.saturating_sub(1)).map(|i| scale * (1.0 + ((seed >> (i % 60)) & 7) as f64)).collect();
            let dec = LanczosDecomp { basis: vec![], alpha: alpha.clone(), beta: beta.clone(), breakdown_step: None, start_norm: 1.0 };
            let eig = SymmetricEigen::new(dec.tridiagonal());
            let (nodes, weights) = gauss_rule(&alpha, &beta).unwrap();
            let norm = eig.eigenvalues.amax().max(1.0);
            // Same spectrum, and the rule integrates x -> x and x -> x² exactly.
            let mut got = nodes.clone();
            let mut want: Vec<f64> = eig.eigenvalues.iter().copied().collect();
            got.sort_by(f64::total_cmp);
            want.sort_by(f64::total_cmp);
            for (g, w) in got.iter().zip(&want) {
                prop_assert!((g - w).abs() <= 1e-10 * norm, "{} vs {}", g, w);
            }
            prop_assert!((weights.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            let m1: f64 = nodes.iter().zip(&weights).map(|(x, w)| w * x).sum();
            let m2: f64 = nodes.iter().zip(&weights).map(|(x, w)| w * x * x).sum();
            let t11_sq = alpha[0] * alpha[0] + beta.first().map_or(0.0, |b| b * b);
            prop_assert!((m1 - alpha[0]).abs() <= 1e-10 * norm);
            prop_assert!((m2 - t11_sq).abs() <= 1e-10 * norm * norm);
        }
    }

    #[test]
    fn start_norm_scales_quadform() {
        let a = random_spd(10, 5.0, 1.0, 1).unwrap();
        let op = DenseSymOp::new(a).unwrap();
        let w = DVector::from_fn(10, |i, _| i as f64 - 4.5);
        let q1 = lanczos_quadform_log(&op, &w, 10).unwrap();
        let q2 = lanczos_quadform_log(&op, &(&w * 3.0), 10).unwrap();
        assert_relative_eq!(q2, 9.0 * q1, max_relative = 1e-10);
    }
}
