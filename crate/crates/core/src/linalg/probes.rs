//! Rademacher probe vectors.
//!
//! Column `j` of a probe set with seed `s` is generated by a ChaCha8 stream
//! seeded with `s` and positioned on stream `j`; each entry is `+1` when one
//! uniform draw in `[0, 1)` falls below `0.5`, else `-1`. Columns are therefore
//! independent of `N`, so a set of `N` probes is a prefix of a set of `N' > N`.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeSet {
    w: DMatrix<f64>,
    seed: Option<u64>,
}

impl ProbeSet {
    /// Draw an `m × n` Rademacher probe matrix.
    pub fn rademacher(m: usize, n: usize, seed: u64) -> Result<Self> {
        if m == 0 || n == 0 {
            return Err(Error::invalid(format!("probe set needs m, N >= 1 (got m={m}, N={n})")));
        }
        let mut w = DMatrix::zeros(m, n);
        for j in 0..n {
            let mut rng = column_rng(seed, j as u64);
            for i in 0..m {
                let u: f64 = rng.random();
                w[(i, j)] = if u < 0.5 { 1.0 } else { -1.0 };
            }
        }
        Ok(Self { w, seed: Some(seed) })
    }

    /// Arbitrary probe vectors (canonical basis, tests, oracles).
    pub fn from_matrix(w: DMatrix<f64>) -> Result<Self> {
        if w.nrows() == 0 || w.ncols() == 0 {
            return Err(Error::invalid("probe matrix must be nonempty"));
        }
        Ok(Self { w, seed: None })
    }

    /// The `m` scaled canonical vectors `√m eᵢ`, so that `(1/N) Σ wᵢwᵢᵀ = I`
    /// as for Rademacher probes and averaged quadratic forms give exact traces.
    pub fn canonical(m: usize) -> Result<Self> {
        Self::from_matrix(DMatrix::identity(m, m) * (m as f64).sqrt())
    }

    pub fn dim(&self) -> usize {
        self.w.nrows()
    }

    pub fn len(&self) -> usize {
        self.w.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.w.ncols() == 0
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.w
    }

    pub fn column(&self, j: usize) -> DVector<f64> {
        self.w.column(j).into_owned()
    }
}

fn column_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Derive an independent child seed; used for per-iteration probe sets and
/// audit probes.
pub fn split_seed(seed: u64, index: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9E37_79B9_7F4A_7C15);
    rng.set_stream(index);
    rng.next_u64()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn small_set_has_unit_entries() {
        let p = ProbeSet::rademacher(4, 2, 7).unwrap();
        assert_eq!(p.matrix().shape(), (4, 2));
        assert!(p.matrix().iter().all(|&v| v == 1.0 || v == -1.0));
    }

    #[test]
    fn regeneration_is_identical() {
        let a = ProbeSet::rademacher(17, 5, 99).unwrap();
        let b = ProbeSet::rademacher(17, 5, 99).unwrap();
        assert_eq!(a, b);
        let c = ProbeSet::rademacher(17, 5, 100).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn columns_are_nested_across_counts() {
        let small = ProbeSet::rademacher(10, 3, 5).unwrap();
        let big = ProbeSet::rademacher(10, 8, 5).unwrap();
        assert_eq!(small.matrix(), &big.matrix().columns(0, 3).into_owned());
    }

    #[test]
    fn zero_sizes_are_rejected() {
        assert!(matches!(ProbeSet::rademacher(0, 3, 1), Err(Error::InvalidArgument(_))));
        assert!(matches!(ProbeSet::rademacher(3, 0, 1), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn column_means_obey_binomial_tail() {
        // P(|mean| > 4/sqrt(m)) for a sum of m signs is about 6e-5, so almost
        // every column should be inside the band.
        let m = 1000;
        let p = ProbeSet::rademacher(m, 200, 1).unwrap();
        let band = 4.0 / (m as f64).sqrt();
        let inside = (0..200).filter(|&j| (p.matrix().column(j).sum() / m as f64).abs() <= band).count();
        assert!(inside as f64 >= 0.95 * 200.0, "{inside} columns inside");
    }

    #[test]
    fn split_seeds_differ() {
        let s: Vec<u64> = (0..50).map(|i| split_seed(3, i)).collect();
        let mut d = s.clone();
        d.sort_unstable();
        d.dedup();
        assert_eq!(d.len(), s.len());
    }

    proptest! {
        #[test]
        fn entries_are_signs(m in 1usize..40, n in 1usize..6, seed in any::<u64>()) {
            let p = ProbeSet::rademacher(m, n, seed).unwrap();
            prop_assert!(p.matrix().iter().all(|&v| v == 1.0 || v == -1.0));
        }
    }
}
