//! `trace-bench`: SLQ log-determinants against dense truth, with N and K
//! taken from the bounds unless overridden.

use std::path::PathBuf;

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use hypermarg_core::bounds::{lanczos_steps_bound, slq_samples_bound, LogNorms, SpectralConstants};
use hypermarg_core::linalg::{dense_logdet, offdiag_norms, random_spd, split_seed, sym_function, DenseSymOp, ProbeSet};
use hypermarg_core::objective::slq_logdet;

use crate::error::{CliError, Result};
use crate::output::{ensure_dir, num, write_csv};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MatrixSource {
    /// `count` matrices from `random_spd(m, kappa, mixing, ·)`.
    RandomSpd { m: usize, kappa: f64, mixing: f64, count: usize, seed: u64 },
    Identity { m: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchConfig {
    pub matrices: MatrixSource,
    pub eps: f64,
    pub delta: f64,
    pub trials: usize,
    #[serde(default)]
    pub seed: u64,
    /// Probe counts to sweep instead of the bound.
    #[serde(default)]
    pub n_sweep: Option<Vec<usize>>,
    /// Lanczos steps instead of the bound.
    #[serde(default)]
    pub lanczos_steps: Option<usize>,
    #[serde(default = "default_bench_dir")]
    pub directory: PathBuf,
}

fn default_bench_dir() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BenchRow {
    pub m: usize,
    pub n: usize,
    pub k: usize,
    pub seed: u64,
    pub exact_logdet: f64,
    pub hutchinson_slq: f64,
    pub abs_err: f64,
    pub bound_eps: f64,
}

/// Constants for a single fixed matrix: the parameter set is a point, so
/// `L_Ψ = 0`, the covering number is 1, and the log norms are audited.
pub fn matrix_constants(a: &DMatrix<f64>) -> Result<SpectralConstants> {
    let m = a.nrows();
    let eig = SymmetricEigen::new(a.clone()).eigenvalues;
    let (alpha, beta) = (eig.min(), eig.max());
    if !(alpha > 0.0) {
        return Err(CliError::Config(format!("matrix is not positive definite (λ_min = {alpha})")));
    }
    let log_norms = offdiag_norms(&sym_function(a, f64::ln)?);
    Ok(SpectralConstants {
        alpha,
        beta,
        lipschitz: 0.0,
        varsigma_f: a.norm() / alpha,
        varsigma_2: beta / alpha,
        radius: 1.0,
        p: 1,
        m,
        log_norms: LogNorms::Audited { frobenius: log_norms.frobenius, spectral: log_norms.spectral },
    })
}

fn matrices(src: &MatrixSource) -> Result<Vec<DMatrix<f64>>> {
    Ok(match *src {
        MatrixSource::RandomSpd { m, kappa, mixing, count, seed } => {
            (0..count as u64).map(|i| random_spd(m, kappa, mixing, split_seed(seed, i))).collect::<std::result::Result<_, _>>()?
        }
        MatrixSource::Identity { m } => vec![DMatrix::identity(m, m)],
    })
}

pub fn trace_bench(cfg: &BenchConfig) -> Result<Vec<BenchRow>> {
    if cfg.trials == 0 {
        return Err(CliError::Config("trials must be >= 1".into()));
    }
    if matches!(&cfg.n_sweep, Some(v) if v.is_empty() || v.contains(&0)) || cfg.lanczos_steps == Some(0) {
        return Err(CliError::Config("n_sweep entries and lanczos_steps must be >= 1".into()));
    }
    let mut rows = Vec::new();
    for (i, a) in matrices(&cfg.matrices)?.into_iter().enumerate() {
        let m = a.nrows();
        let consts = matrix_constants(&a)?;
        let k = match cfg.lanczos_steps {
            Some(k) => k,
            None => lanczos_steps_bound(consts.kappa(), m, cfg.eps)?,
        }
        .min(m);
        let ns = match &cfg.n_sweep {
            Some(v) => v.clone(),
            None => vec![usize::try_from(slq_samples_bound(cfg.eps, cfg.delta, &consts)?)
                .map_err(|_| CliError::Numerical("sample bound exceeds usize".into()))?],
        };
        let exact = dense_logdet(&a)?;
        let op = DenseSymOp::new(a)?;
        let base = split_seed(cfg.seed, i as u64);
        for n in ns {
            let batch: Vec<BenchRow> = (0..cfg.trials as u64)
                .into_par_iter()
                .map(|t| {
                    let seed = split_seed(base, t);
                    let probes = ProbeSet::rademacher(m, n, seed)?;
                    let est = slq_logdet(&op, &probes, k, None)?;
                    Ok(BenchRow { m, n, k, seed, exact_logdet: exact, hutchinson_slq: est, abs_err: (est - exact).abs(), bound_eps: cfg.eps })
                })
                .collect::<std::result::Result<_, hypermarg_core::Error>>()?;
            rows.extend(batch);
        }
    }
    Ok(rows)
}

/// Fraction of rows whose error exceeds the target.
pub fn failure_rate(rows: &[BenchRow]) -> f64 {
    if rows.is_empty() {
        return 0.0;
    }
    rows.iter().filter(|r| r.abs_err > r.bound_eps).count() as f64 / rows.len() as f64
}

pub fn write_bench(cfg: &BenchConfig, rows: &[BenchRow]) -> Result<PathBuf> {
    ensure_dir(&cfg.directory)?;
    let path = cfg.directory.join("bench.csv");
    let header: Vec<String> =
        ["m", "N", "K", "seed", "exact_logdet", "hutchinson_slq", "abs_err", "bound_eps"].iter().map(|s| s.to_string()).collect();
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.m.to_string(),
                r.n.to_string(),
                r.k.to_string(),
                r.seed.to_string(),
                num(r.exact_logdet),
                num(r.hutchinson_slq),
                num(r.abs_err),
                num(r.bound_eps),
            ]
        })
        .collect();
    write_csv(&path, &header, &body)?;
    Ok(path)
}
