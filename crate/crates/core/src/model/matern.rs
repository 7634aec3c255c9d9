//! Matérn covariance on a point set, assembled densely.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::check_dense_limit;

/// Half-integer smoothness values with closed-form kernels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum Smoothness {
    #[default]
    #[serde(rename = "0.5")]
    Half,
    #[serde(rename = "1.5")]
    ThreeHalves,
    #[serde(rename = "2.5")]
    FiveHalves,
}

impl Smoothness {
    pub fn nu(self) -> f64 {
        match self {
            Smoothness::Half => 0.5,
            Smoothness::ThreeHalves => 1.5,
            Smoothness::FiveHalves => 2.5,
        }
    }

    /// Kernel value at distance `d` for unit variance.
    fn unit_kernel(self, d: f64, ell: f64) -> f64 {
        match self {
            Smoothness::Half => (-d / ell).exp(),
            Smoothness::ThreeHalves => {
                let u = 3f64.sqrt() * d / ell;
                (1.0 + u) * (-u).exp()
            }
            Smoothness::FiveHalves => {
                let u = 5f64.sqrt() * d / ell;
                (1.0 + u + u * u / 3.0) * (-u).exp()
            }
        }
    }

    /// ∂/∂ℓ of the unit-variance kernel.
    fn unit_kernel_dell(self, d: f64, ell: f64) -> f64 {
        match self {
            Smoothness::Half => {
                let u = d / ell;
                u * (-u).exp() / ell
            }
            Smoothness::ThreeHalves => {
                let u = 3f64.sqrt() * d / ell;
                u * u * (-u).exp() / ell
            }
            Smoothness::FiveHalves => {
                let u = 5f64.sqrt() * d / ell;
                u * u * (1.0 + u) * (-u).exp() / (3.0 * ell)
            }
        }
    }
}

/// Pairwise distances of a fixed point set.
#[derive(Debug, Clone)]
pub struct MaternKernel {
    dist: DMatrix<f64>,
    nu: Smoothness,
}

impl MaternKernel {
    pub fn new(points: &[[f64; 2]], nu: Smoothness) -> Result<Self> {
        let n = points.len();
        if n == 0 {
            return Err(Error::invalid("Matérn covariance needs at least one point"));
        }
        check_dense_limit(n)?;
        let dist = DMatrix::from_fn(n, n, |i, j| {
            let dx = points[i][0] - points[j][0];
            let dy = points[i][1] - points[j][1];
            (dx * dx + dy * dy).sqrt()
        });
        Ok(Self { dist, nu })
    }

    pub fn dim(&self) -> usize {
        self.dist.nrows()
    }

    pub fn smoothness(&self) -> Smoothness {
        self.nu
    }

    fn check(sigma: f64, ell: f64) -> Result<()> {
        if !(sigma > 0.0) || !(ell > 0.0) || !sigma.is_finite() || !ell.is_finite() {
            return Err(Error::invalid(format!(
                "Matérn needs positive standard deviation and length scale, got {sigma} and {ell}"
            )));
        }
        Ok(())
    }

    /// Covariance `σ² k_ν(‖r − r'‖; ℓ)`.
    pub fn matrix(&self, sigma: f64, ell: f64) -> Result<DMatrix<f64>> {
        Self::check(sigma, ell)?;
        let s2 = sigma * sigma;
        Ok(self.dist.map(|d| s2 * self.nu.unit_kernel(d, ell)))
    }

    /// ∂C/∂σ.
    pub fn d_sigma(&self, sigma: f64, ell: f64) -> Result<DMatrix<f64>> {
        Self::check(sigma, ell)?;
        Ok(self.dist.map(|d| 2.0 * sigma * self.nu.unit_kernel(d, ell)))
    }

    /// ∂C/∂ℓ.
    pub fn d_length(&self, sigma: f64, ell: f64) -> Result<DMatrix<f64>> {
        Self::check(sigma, ell)?;
        let s2 = sigma * sigma;
        Ok(self.dist.map(|d| s2 * self.nu.unit_kernel_dell(d, ell)))
    }
}

/// Dense Matérn covariance on `points`.
pub fn matern_cov(points: &[[f64; 2]], sigma: f64, ell: f64, nu: Smoothness) -> Result<DMatrix<f64>> {
    MaternKernel::new(points, nu)?.matrix(sigma, ell)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::SymmetricEigen;
    use proptest::prelude::*;

    /// Γ(ν) and K_ν for half-integer ν, written from the Bessel recurrence
    /// K_{ν+1}(x) = K_{ν−1}(x) + (2ν/x) K_ν(x) with K_{±1/2}(x) = √(π/2x) e^{−x}.
    fn general_matern(d: f64, sigma: f64, ell: f64, nu: f64) -> f64 {
        if d == 0.0 {
            return sigma * sigma;
        }
        let x = (2.0 * nu).sqrt() * d / ell;
        let k_half = (std::f64::consts::PI / (2.0 * x)).sqrt() * (-x).exp();
        let (mut k_prev, mut k_cur, mut order) = (k_half, k_half, 0.5);
        while order < nu - 1e-9 {
            let next = k_prev + 2.0 * order / x * k_cur;
            k_prev = k_cur;
            k_cur = next;
            order += 1.0;
        }
        let gamma = match nu {
            v if (v - 0.5).abs() < 1e-12 => std::f64::consts::PI.sqrt(),
            v if (v - 1.5).abs() < 1e-12 => std::f64::consts::PI.sqrt() / 2.0,
            _ => 3.0 * std::f64::consts::PI.sqrt() / 4.0,
        };
        sigma * sigma * 2f64.powf(1.0 - nu) / gamma * x.powf(nu) * k_cur
    }

    const ALL: [Smoothness; 3] = [Smoothness::Half, Smoothness::ThreeHalves, Smoothness::FiveHalves];

    #[test]
    fn diagonal_is_variance() {
        let pts = [[0.0, 0.0], [0.3, 0.4]];
        for nu in ALL {
            let c = matern_cov(&pts, 1.7, 0.2, nu).unwrap();
            assert!((c[(0, 0)] - 1.7 * 1.7).abs() < 1e-15);
        }
    }

    #[test]
    fn exponential_kernel_at_unit_distance() {
        let c = matern_cov(&[[0.0, 0.0], [0.6, 0.8]], 1.0, 1.0, Smoothness::Half).unwrap();
        assert!((c[(0, 1)] - 0.367_879_441_171_442_33).abs() < 1e-15);
    }

    #[test]
    fn closed_forms_match_bessel_definition() {
        for nu in ALL {
            for &d in &[0.01, 0.1, 0.5, 1.0, 2.5] {
                let got = matern_cov(&[[0.0, 0.0], [d, 0.0]], 1.3, 0.7, nu).unwrap()[(0, 1)];
                let want = general_matern(d, 1.3, 0.7, nu.nu());
                assert!((got - want).abs() <= 1e-12 * want.max(1e-300), "nu={} d={d}: {got} vs {want}", nu.nu());
            }
        }
    }

    #[test]
    fn rejects_nonpositive_parameters() {
        let pts = [[0.0, 0.0]];
        assert!(matches!(matern_cov(&pts, 0.0, 1.0, Smoothness::Half), Err(Error::InvalidArgument(_))));
        assert!(matches!(matern_cov(&pts, 1.0, -1.0, Smoothness::Half), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn derivatives_match_finite_differences() {
        let pts: Vec<[f64; 2]> = (0..6).map(|i| [i as f64 * 0.13, (i * i) as f64 * 0.05]).collect();
        for nu in ALL {
            let k = MaternKernel::new(&pts, nu).unwrap();
            let (s, l, h) = (0.9, 0.4, 1e-6);
            let fd_s = (k.matrix(s + h, l).unwrap() - k.matrix(s - h, l).unwrap()) / (2.0 * h);
            let fd_l = (k.matrix(s, l + h).unwrap() - k.matrix(s, l - h).unwrap()) / (2.0 * h);
            assert!((fd_s - k.d_sigma(s, l).unwrap()).amax() < 1e-8);
            assert!((fd_l - k.d_length(s, l).unwrap()).amax() < 1e-8);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn random_points_give_psd_matrix(
            pts in proptest::collection::vec((0.0f64..1.0, 0.0f64..1.0), 10),
            sigma in 0.1f64..3.0, ell in 0.05f64..2.0, which in 0usize..3,
        ) {
            let pts: Vec<[f64; 2]> = pts.into_iter().map(|(a, b)| [a, b]).collect();
            let c = matern_cov(&pts, sigma, ell, ALL[which]).unwrap();
            let min = SymmetricEigen::new(c.clone()).eigenvalues.min();
            prop_assert!(min >= -1e-9 * c.amax(), "min eigenvalue {}", min);
        }
    }
}
