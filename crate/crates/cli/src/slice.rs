//! `majorant-slice`: F and the exact majorant G(·|θ_t) along one axis.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use hypermarg_core::linalg::DENSE_LIMIT;
use hypermarg_core::mm::ExactSurrogate;
use hypermarg_core::model::{make_test_problem, ProblemSpec, TestProblem};
use hypermarg_core::objective::eval_f_exact;

use crate::error::{CliError, Result};
use crate::output::{ensure_dir, num, write_csv};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrueValue {
    True,
}

/// One anchor coordinate: a number, or `"true"` for the problem's θ_true.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AnchorEntry {
    Value(f64),
    Truth(TrueValue),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Spacing {
    #[default]
    Linear,
    Log,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    /// Defaults to the box limits on the sliced axis.
    #[serde(default)]
    pub lower: Option<f64>,
    #[serde(default)]
    pub upper: Option<f64>,
    pub points: usize,
    #[serde(default)]
    pub spacing: Spacing,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SliceConfig {
    pub problem: TestProblem,
    pub anchor: Vec<AnchorEntry>,
    /// Zero-based hyperparameter index.
    pub axis: usize,
    pub grid: GridConfig,
    #[serde(default = "default_slice_dir")]
    pub directory: PathBuf,
}

fn default_slice_dir() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SliceRow {
    pub theta_j: f64,
    pub f: f64,
    pub g: f64,
    pub is_anchor: bool,
}

fn resolve_anchor(problem: &ProblemSpec, entries: &[AnchorEntry]) -> Result<Vec<f64>> {
    entries
        .iter()
        .enumerate()
        .map(|(j, e)| match e {
            AnchorEntry::Value(v) => Ok(*v),
            AnchorEntry::Truth(_) => problem
                .theta_true()
                .map(|t| t.as_slice()[j])
                .ok_or_else(|| CliError::Config(format!("anchor component {j} asks for θ_true, which this problem lacks"))),
        })
        .collect()
}

fn grid_points(g: &GridConfig, lo: f64, hi: f64) -> Result<Vec<f64>> {
    if g.points < 2 || !(lo < hi) {
        return Err(CliError::Config(format!("grid needs >= 2 points and lower < upper, got {} on [{lo}, {hi}]", g.points)));
    }
    let n = g.points - 1;
    match g.spacing {
        Spacing::Linear => Ok((0..=n).map(|i| lo + (hi - lo) * i as f64 / n as f64).collect()),
        Spacing::Log if lo > 0.0 => {
            let (a, b) = (lo.ln(), hi.ln());
            Ok((0..=n).map(|i| (a + (b - a) * i as f64 / n as f64).exp()).collect())
        }
        Spacing::Log => Err(CliError::Config(format!("log spacing needs a positive lower limit, got {lo}"))),
    }
}

/// Evaluate F and G over the grid plus the anchor coordinate itself.
pub fn majorant_slice(cfg: &SliceConfig) -> Result<Vec<SliceRow>> {
    let problem = make_test_problem(&cfg.problem)?;
    if problem.data_dim() > DENSE_LIMIT || problem.state_dim() > DENSE_LIMIT {
        return Err(CliError::Config(format!("majorant slices need a dense-auditable problem (dimension <= {DENSE_LIMIT})")));
    }
    let p = problem.n_params();
    if cfg.axis >= p || cfg.anchor.len() != p {
        return Err(CliError::Config(format!("problem has {p} hyperparameters; got axis {} and {} anchor entries", cfg.axis, cfg.anchor.len())));
    }
    let anchor = problem.params(&resolve_anchor(&problem, &cfg.anchor)?)?;
    let bounds = problem.bounds();
    if !bounds.contains(anchor.as_slice()) {
        return Err(CliError::Config(format!("anchor {:?} lies outside the parameter box", anchor.as_slice())));
    }
    let lo = cfg.grid.lower.unwrap_or(bounds.lower()[cfg.axis]);
    let hi = cfg.grid.upper.unwrap_or(bounds.upper()[cfg.axis]);
    let centre = anchor.as_slice()[cfg.axis];
    let mut xs = grid_points(&cfg.grid, lo, hi)?;
    xs.push(centre);
    xs.sort_by(f64::total_cmp);
    xs.dedup();

    let g = ExactSurrogate::new(&problem, &anchor)?;
    xs.into_iter()
        .map(|v| {
            let theta = anchor.with_component(cfg.axis, v);
            let f = eval_f_exact(&problem, &theta)?.value;
            Ok(SliceRow { theta_j: v, f, g: g.value(&theta)?, is_anchor: v == centre })
        })
        .collect()
}

pub fn write_slice(cfg: &SliceConfig, rows: &[SliceRow]) -> Result<PathBuf> {
    ensure_dir(&cfg.directory)?;
    let path = cfg.directory.join("slice.csv");
    let header = [format!("theta_{}", cfg.axis + 1), "F".into(), "G".into()];
    let body: Vec<Vec<String>> = rows.iter().map(|r| vec![num(r.theta_j), num(r.f), num(r.g)]).collect();
    write_csv(&path, &header, &body)?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(points: usize, spacing: Spacing) -> GridConfig {
        GridConfig { lower: None, upper: None, points, spacing }
    }

    #[test]
    fn grids_hit_both_ends() {
        let lin = grid_points(&grid(5, Spacing::Linear), 1.0, 3.0).unwrap();
        assert_eq!(lin, vec![1.0, 1.5, 2.0, 2.5, 3.0]);
        let log = grid_points(&grid(3, Spacing::Log), 0.01, 1.0).unwrap();
        assert!((log[1] - 0.1).abs() < 1e-15 && (log[2] - 1.0).abs() < 1e-15);
        assert!(grid_points(&grid(3, Spacing::Log), 0.0, 1.0).is_err());
        assert!(grid_points(&grid(1, Spacing::Linear), 0.0, 1.0).is_err());
    }

    #[test]
    fn anchors_mix_numbers_and_truth() {
        let a: Vec<AnchorEntry> = serde_json::from_str(r#"["true", 2.0]"#).unwrap();
        assert_eq!(a, vec![AnchorEntry::Truth(TrueValue::True), AnchorEntry::Value(2.0)]);
        assert!(serde_json::from_str::<Vec<AnchorEntry>>(r#"["truth"]"#).is_err());
    }

    #[test]
    fn anchor_outside_box_is_a_config_error() {
        let cfg: SliceConfig = serde_json::from_str(
            r#"{"problem": {"kind": "tomo"}, "anchor": [1e-4, 7.0, 0.2], "axis": 0, "grid": {"points": 3}}"#,
        )
        .unwrap();
        assert!(matches!(majorant_slice(&cfg), Err(CliError::Config(_))));
    }
}
