//! Dense oracles for small problems.

use nalgebra::{Cholesky, DMatrix, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::op::DENSE_LIMIT;
use crate::error::{Error, Result};

pub fn check_dense_limit(dim: usize) -> Result<()> {
    if dim > DENSE_LIMIT {
        return Err(Error::DenseLimit { dim, limit: DENSE_LIMIT });
    }
    Ok(())
}

/// Lower Cholesky factor `L` with `L Lᵀ = M`. Only the lower triangle of `M`
/// is read. A nonpositive pivot is reported by index.
pub fn cholesky_lower(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = m.nrows();
    if n != m.ncols() {
        return Err(Error::invalid(format!("matrix is {}x{}, not square", n, m.ncols())));
    }
    check_dense_limit(n)?;
    match Cholesky::new(m.clone()) {
        Some(c) if c.l_dirty().diagonal().iter().all(|d| d.is_finite() && *d > 0.0) => Ok(c.unpack()),
        _ => {
            let (j, d) = first_bad_pivot(m);
            Err(Error::numerical(format!("matrix not positive definite: pivot {j} is {d:e}")))
        }
    }
}

/// Rerun the factorization by hand to locate the pivot that failed.
fn first_bad_pivot(m: &DMatrix<f64>) -> (usize, f64) {
    let n = m.nrows();
    let mut l = DMatrix::<f64>::zeros(n, n);
    for j in 0..n {
        let d = m[(j, j)] - (0..j).map(|k| l[(j, k)] * l[(j, k)]).sum::<f64>();
        if !(d > 0.0) || !d.is_finite() {
            return (j, d);
        }
        l[(j, j)] = d.sqrt();
        for i in (j + 1)..n {
            let s = m[(i, j)] - (0..j).map(|k| l[(i, k)] * l[(j, k)]).sum::<f64>();
            l[(i, j)] = s / l[(j, j)];
        }
    }
    (n.saturating_sub(1), f64::NAN)
}

/// Log-determinant of a symmetric positive definite matrix via Cholesky.
pub fn dense_logdet(m: &DMatrix<f64>) -> Result<f64> {
    let l = cholesky_lower(m)?;
    Ok(2.0 * l.diagonal().iter().map(|d| d.ln()).sum::<f64>())
}

/// `f(M)` for symmetric `M` through its eigendecomposition.
pub fn sym_function(m: &DMatrix<f64>, f: impl Fn(f64) -> f64) -> Result<DMatrix<f64>> {
    check_dense_limit(m.nrows())?;
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let fd = eig.eigenvalues.map(f);
    if fd.iter().any(|v| !v.is_finite()) {
        return Err(Error::numerical("matrix function produced a non-finite value"));
    }
    let scaled = &eig.eigenvectors * DMatrix::from_diagonal(&fd);
    let out = scaled * eig.eigenvectors.transpose();
    Ok((&out + out.transpose()) * 0.5)
}

/// Frobenius and spectral norms of the off-diagonal part of a symmetric matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OffdiagNorms {
    pub frobenius: f64,
    pub spectral: f64,
}

pub fn offdiag_norms(b: &DMatrix<f64>) -> OffdiagNorms {
    let mut off = b.clone();
    off.fill_diagonal(0.0);
    let off = (&off + off.transpose()) * 0.5;
    let frobenius = off.norm();
    let spectral = if off.nrows() == 0 {
        0.0
    } else {
        SymmetricEigen::new(off).eigenvalues.iter().fold(0.0_f64, |a, v| a.max(v.abs()))
    };
    OffdiagNorms { frobenius, spectral }
}

/// Random SPD matrix with eigenvalues log-spaced on `[1, kappa]` and
/// eigenvectors from the QR factor of `I + mixing·G` with Gaussian `G`.
/// Small `mixing` keeps the matrix close to diagonal.
pub fn random_spd(m: usize, kappa: f64, mixing: f64, seed: u64) -> Result<DMatrix<f64>> {
    if m == 0 {
        return Err(Error::invalid("random_spd needs m >= 1"));
    }
    if !(kappa >= 1.0) || !kappa.is_finite() {
        return Err(Error::invalid(format!("condition number must be >= 1, got {kappa}")));
    }
    check_dense_limit(m)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = DMatrix::from_fn(m, m, |_, _| StandardNormal.sample(&mut rng));
    let q = (DMatrix::<f64>::identity(m, m) + g * mixing).qr().q();
    let lambdas: Vec<f64> = (0..m)
        .map(|i| if m == 1 { 1.0 } else { kappa.powf(i as f64 / (m - 1) as f64) })
        .collect();
    let d = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(lambdas));
    let out = &q * d * q.transpose();
    Ok((&out + out.transpose()) * 0.5)
}
