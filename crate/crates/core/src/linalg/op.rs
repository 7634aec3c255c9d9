use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use nalgebra_sparse::CsrMatrix;

use crate::error::{Error, Result};

/// Largest dimension for which dense assembly is permitted.
pub const DENSE_LIMIT: usize = 2048;

/// Shared, thread-safe matvec counter.
#[derive(Debug, Default, Clone)]
pub struct Counter(Arc<AtomicU64>);

impl Counter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn incr(&self) {
        self.0.fetch_add(1, Ordering::Relaxed);
    }

    pub fn add(&self, n: u64) {
        self.0.fetch_add(n, Ordering::Relaxed);
    }

    pub fn get(&self) -> u64 {
        self.0.load(Ordering::Relaxed)
    }
}

/// Rectangular linear operator with a transpose action.
pub trait LinOp: Send + Sync {
    fn nrows(&self) -> usize;
    fn ncols(&self) -> usize;
    fn apply(&self, x: &DVector<f64>) -> DVector<f64>;
    fn apply_t(&self, y: &DVector<f64>) -> DVector<f64>;

    /// Dense materialization column by column.
    fn to_dense(&self) -> Result<DMatrix<f64>> {
        let (m, n) = (self.nrows(), self.ncols());
        check_dims(m.max(n))?;
        let mut out = DMatrix::zeros(m, n);
        let mut e = DVector::zeros(n);
        for j in 0..n {
            e[j] = 1.0;
            out.set_column(j, &self.apply(&e));
            e[j] = 0.0;
        }
        Ok(out)
    }
}

fn check_dims(dim: usize) -> Result<()> {
    if dim > DENSE_LIMIT {
        Err(Error::DenseLimit { dim, limit: DENSE_LIMIT })
    } else {
        Ok(())
    }
}

impl LinOp for DMatrix<f64> {
    fn nrows(&self) -> usize {
        self.nrows()
    }
    fn ncols(&self) -> usize {
        self.ncols()
    }
    fn apply(&self, x: &DVector<f64>) -> DVector<f64> {
        self * x
    }
    fn apply_t(&self, y: &DVector<f64>) -> DVector<f64> {
        self.tr_mul(y)
    }
    fn to_dense(&self) -> Result<DMatrix<f64>> {
        Ok(self.clone())
    }
}

impl LinOp for CsrMatrix<f64> {
    fn nrows(&self) -> usize {
        self.nrows()
    }
    fn ncols(&self) -> usize {
        self.ncols()
    }
    fn apply(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.nrows());
        for (i, row) in self.row_iter().enumerate() {
            let mut acc = 0.0;
            for (&j, &a) in row.col_indices().iter().zip(row.values()) {
                acc += a * x[j];
            }
            out[i] = acc;
        }
        out
    }
    fn apply_t(&self, y: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.ncols());
        for (i, row) in self.row_iter().enumerate() {
            let yi = y[i];
            for (&j, &a) in row.col_indices().iter().zip(row.values()) {
                out[j] += a * yi;
            }
        }
        out
    }
    fn to_dense(&self) -> Result<DMatrix<f64>> {
        check_dims(self.nrows().max(self.ncols()))?;
        let mut out = DMatrix::zeros(self.nrows(), self.ncols());
        for (i, row) in self.row_iter().enumerate() {
            for (&j, &a) in row.col_indices().iter().zip(row.values()) {
                out[(i, j)] += a;
            }
        }
        Ok(out)
    }
}

impl<T: LinOp + ?Sized> LinOp for Arc<T> {
    fn nrows(&self) -> usize {
        (**self).nrows()
    }
    fn ncols(&self) -> usize {
        (**self).ncols()
    }
    fn apply(&self, x: &DVector<f64>) -> DVector<f64> {
        (**self).apply(x)
    }
    fn apply_t(&self, y: &DVector<f64>) -> DVector<f64> {
        (**self).apply_t(y)
    }
    fn to_dense(&self) -> Result<DMatrix<f64>> {
        (**self).to_dense()
    }
}

/// Symmetric operator with a matvec counter.
pub trait SymOp: Send + Sync {
    fn dim(&self) -> usize;
    fn apply(&self, v: &DVector<f64>) -> DVector<f64>;
    fn matvec_count(&self) -> u64;

    /// Dense materialization by `dim` matvecs; refused above [`DENSE_LIMIT`].
    fn to_dense(&self) -> Result<DMatrix<f64>> {
        let m = self.dim();
        check_dims(m)?;
        let mut out = DMatrix::zeros(m, m);
        let mut e = DVector::zeros(m);
        for j in 0..m {
            e[j] = 1.0;
            out.set_column(j, &self.apply(&e));
            e[j] = 0.0;
        }
        Ok(out)
    }
}

impl<T: SymOp + ?Sized> SymOp for &T {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn apply(&self, v: &DVector<f64>) -> DVector<f64> {
        (**self).apply(v)
    }
    fn matvec_count(&self) -> u64 {
        (**self).matvec_count()
    }
    fn to_dense(&self) -> Result<DMatrix<f64>> {
        (**self).to_dense()
    }
}

impl<T: SymOp + ?Sized> SymOp for Arc<T> {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn apply(&self, v: &DVector<f64>) -> DVector<f64> {
        (**self).apply(v)
    }
    fn matvec_count(&self) -> u64 {
        (**self).matvec_count()
    }
    fn to_dense(&self) -> Result<DMatrix<f64>> {
        (**self).to_dense()
    }
}

/// Dense symmetric matrix viewed as a [`SymOp`].
#[derive(Debug, Clone)]
pub struct DenseSymOp {
    matrix: DMatrix<f64>,
    counter: Counter,
}

impl DenseSymOp {
    pub fn new(matrix: DMatrix<f64>) -> Result<Self> {
        if matrix.nrows() != matrix.ncols() || matrix.nrows() == 0 {
            return Err(Error::invalid(format!(
                "symmetric operator needs a nonempty square matrix, got {}x{}",
                matrix.nrows(),
                matrix.ncols()
            )));
        }
        Ok(Self { matrix, counter: Counter::new() })
    }

    pub fn identity(m: usize) -> Self {
        Self { matrix: DMatrix::identity(m, m), counter: Counter::new() }
    }

    pub fn from_diagonal(d: &[f64]) -> Self {
        Self {
            matrix: DMatrix::from_diagonal(&DVector::from_column_slice(d)),
            counter: Counter::new(),
        }
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }
}

impl SymOp for DenseSymOp {
    fn dim(&self) -> usize {
        self.matrix.nrows()
    }
    fn apply(&self, v: &DVector<f64>) -> DVector<f64> {
        self.counter.incr();
        &self.matrix * v
    }
    fn matvec_count(&self) -> u64 {
        self.counter.get()
    }
    fn to_dense(&self) -> Result<DMatrix<f64>> {
        check_dims(self.dim())?;
        Ok(self.matrix.clone())
    }
}
