use approx::assert_relative_eq;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::linalg::{PcgOptions, ProbeSet};
use crate::metrics::Termination;
use crate::model::{make_test_problem, noise_only_problem, DeblurConfig, HyperParams, ParamBox, ProblemSpec, TestProblem, TomoConfig};
use crate::objective::eval_f_exact;

fn tight() -> PcgOptions {
    PcgOptions { tol: 1e-12, max_iter: 1000 }
}

fn identity_noise(m: usize) -> ProblemSpec {
    noise_only_problem(DMatrix::zeros(m, 2), DMatrix::identity(2, 2), DVector::from_element(m, 1.0), 0.1, 5.0).unwrap()
}

fn small_deblur() -> ProblemSpec {
    make_test_problem(&TestProblem::Deblur(DeblurConfig { size: 8, psf_half_width: 2, ..DeblurConfig::default() })).unwrap()
}

fn random_dense(m: usize, seed: u64) -> ProblemSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = DMatrix::from_fn(m, m, |_, _| rng.random::<f64>() - 0.5);
    let b = DVector::from_fn(m, |_, _| rng.random::<f64>());
    noise_only_problem(a, DMatrix::identity(m, m), b, 0.1, 10.0).unwrap()
}

fn random_theta(p: &ProblemSpec, rng: &mut ChaCha8Rng) -> HyperParams {
    p.params(p.bounds().sample(rng).as_slice()).unwrap()
}

#[test]
fn identity_solves_return_probes_in_one_iteration() {
    let p = identity_noise(9);
    let probes = ProbeSet::rademacher(9, 4, 1).unwrap();
    let s = precompute_solves(&p, &p.params(&[1.0]).unwrap(), probes.clone(), None, &PcgOptions::default()).unwrap();
    assert_eq!(s.pcg_iterations(), 4);
    for i in 0..4 {
        assert_eq!(s.solves()[i], probes.column(i));
    }
    let s = precompute_solves(&p, &p.params(&[2.0]).unwrap(), probes.clone(), None, &PcgOptions::default()).unwrap();
    for i in 0..4 {
        assert_eq!(s.solves()[i], probes.column(i) / 2.0);
    }
}

#[test]
fn dense_solves_match_inverse() {
    let p = random_dense(20, 4);
    let theta = p.params(&[0.7]).unwrap();
    let probes = ProbeSet::rademacher(20, 6, 2).unwrap();
    let s = precompute_solves(&p, &theta, probes.clone(), None, &PcgOptions { tol: 1e-10, max_iter: 200 }).unwrap();
    let inv = p.dense_psi(&theta).unwrap().try_inverse().unwrap();
    for i in 0..6 {
        let want = &inv * probes.column(i);
        assert!((&s.solves()[i] - &want).norm() <= 1e-7 * want.norm());
    }
}

#[test]
fn unconverged_solve_is_an_error() {
    let p = random_dense(20, 4);
    let probes = ProbeSet::rademacher(20, 2, 2).unwrap();
    let err = precompute_solves(&p, &p.params(&[0.7]).unwrap(), probes, None, &PcgOptions { tol: 1e-10, max_iter: 2 });
    assert!(matches!(err, Err(crate::Error::NotConverged(_))));
}

#[test]
fn preconditioned_solves_agree() {
    let p = random_dense(30, 8);
    let theta = p.params(&[0.3]).unwrap();
    let probes = ProbeSet::rademacher(30, 3, 5).unwrap();
    let psi = p.build_psi(&theta).unwrap();
    let pre = psi_preconditioner(&psi, 10, 1).unwrap();
    let plain = precompute_solves(&p, &theta, probes.clone(), None, &tight()).unwrap();
    let with = precompute_solves(&p, &theta, probes, Some(pre), &tight()).unwrap();
    assert!(with.pcg_iterations() <= plain.pcg_iterations());
    for (a, b) in plain.solves().iter().zip(with.solves()) {
        assert!((a - b).norm() <= 1e-9 * a.norm());
    }
}

#[test]
fn trace_term_is_m_at_identity_anchor() {
    let m = 11;
    let p = identity_noise(m);
    let theta = p.params(&[1.0]).unwrap();
    let s = precompute_solves(&p, &theta, ProbeSet::rademacher(m, 3, 9).unwrap(), None, &tight()).unwrap();
    let e = eval_surrogate_mc(&s, &p, &theta, &tight()).unwrap();
    assert_eq!(e.trace_part, m as f64);
}

#[test]
fn exact_surrogate_touches_at_anchor() {
    for p in [small_deblur(), make_test_problem(&TestProblem::Tomo(TomoConfig::default())).unwrap()] {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..3 {
            let t = random_theta(&p, &mut rng);
            let g = exact_surrogate(&p, &t, &t).unwrap();
            let f = eval_f_exact(&p, &t).unwrap().value;
            assert!((g - f).abs() <= 1e-10, "{g} vs {f}");
        }
    }
}

#[test]
fn exact_surrogate_dominates_on_tomo() {
    let p = make_test_problem(&TestProblem::Tomo(TomoConfig::default())).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for _ in 0..3 {
        let anchor = random_theta(&p, &mut rng);
        let g = ExactSurrogate::new(&p, &anchor).unwrap();
        for _ in 0..30 {
            let t = random_theta(&p, &mut rng);
            assert!(g.value(&t).unwrap() >= eval_f_exact(&p, &t).unwrap().value - 1e-9);
        }
    }
}

#[test]
fn scaled_anchor_majorant_gap() {
    let m = 6;
    let p = identity_noise(m);
    let g = ExactSurrogate::new(&p, &p.params(&[1.0]).unwrap()).unwrap();
    for c in [0.2, 0.9, 1.0, 3.0] {
        let maj = g.logdet_majorant(&p.params(&[c]).unwrap()).unwrap();
        assert_relative_eq!(maj, m as f64 * (c - 1.0), epsilon = 1e-12);
        assert!(maj - m as f64 * c.ln() >= 0.0);
    }
}

#[test]
fn exhaustive_probes_reproduce_exact_surrogate() {
    let p = small_deblur();
    let m = p.data_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let anchor = random_theta(&p, &mut rng);
    let s = precompute_solves(&p, &anchor, ProbeSet::canonical(m).unwrap(), None, &tight()).unwrap();
    let exact = ExactSurrogate::new(&p, &anchor).unwrap();
    // The Monte-Carlo form drops ½(logdet Ψ_t − m).
    let logdet_t = eval_f_exact(&p, &anchor).unwrap().logdet_part;
    let offset = 0.5 * (logdet_t - m as f64);
    for theta in [anchor.clone(), random_theta(&p, &mut rng)] {
        let mc = eval_surrogate_mc(&s, &p, &theta, &tight()).unwrap().value;
        let want = exact.value(&theta).unwrap() - offset;
        assert!((mc - want).abs() <= 1e-8 * want.abs().max(1.0), "{mc} vs {want}");
        let g_mc = grad_surrogate_mc(&s, &p, &theta, None, &tight(), 1e-7).unwrap().grad;
        let g_ex = exact.gradient(&theta).unwrap();
        assert!((&g_mc - &g_ex).norm() <= 1e-6 * g_ex.norm().max(1.0), "{g_mc} vs {g_ex}");
    }
}

#[test]
fn trace_term_is_unbiased() {
    let m = 15;
    let p = random_dense(m, 21);
    let anchor = p.params(&[0.6]).unwrap();
    let theta = p.params(&[1.7]).unwrap();
    let n = 10_000;
    let s = precompute_solves(&p, &anchor, ProbeSet::rademacher(m, n, 77).unwrap(), None, &tight()).unwrap();
    let psi = p.dense_psi(&theta).unwrap();
    let terms: Vec<f64> = (0..n).map(|i| s.solves()[i].dot(&(&psi * s.probes().column(i)))).collect();
    let mean = terms.iter().sum::<f64>() / n as f64;
    let var = terms.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let want = (p.dense_psi(&anchor).unwrap().try_inverse().unwrap() * &psi).trace();
    assert!((mean - want).abs() <= 5.0 * (var / n as f64).sqrt(), "{mean} vs {want}");
    let e = eval_surrogate_mc(&s, &p, &theta, &tight()).unwrap();
    assert_relative_eq!(e.trace_part, mean, max_relative = 1e-10);
}

#[test]
fn mc_gradient_matches_frozen_probe_differences() {
    let p = small_deblur();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let anchor = random_theta(&p, &mut rng);
    let s = precompute_solves(&p, &anchor, ProbeSet::rademacher(p.data_dim(), 8, 4).unwrap(), None, &tight()).unwrap();
    let theta = random_theta(&p, &mut rng);
    let g = grad_surrogate_mc(&s, &p, &theta, None, &tight(), 1e-7).unwrap().grad;
    for j in 0..p.n_params() {
        let t = theta.as_slice()[j];
        let h = 1e-5 * t.abs().max(1e-3);
        let f = |v: f64| eval_surrogate_mc(&s, &p, &theta.with_component(j, v), &tight()).unwrap().value;
        let fd = (f(t + h) - f(t - h)) / (2.0 * h);
        assert!((g[j] - fd).abs() <= 1e-4 * g.amax().max(1e-8), "component {j}: {} vs {fd}", g[j]);
    }
}

#[test]
fn quadratic_inside_box_converges_to_center() {
    let bounds = ParamBox::new(vec![-1.0, -1.0], vec![2.0, 3.0]).unwrap();
    let c = DVector::from_vec(vec![0.5, 1.25]);
    for scaling in [Scaling::Identity, Scaling::Box] {
        let mut obj = FnObjective { f: |t: &DVector<f64>| Ok(0.5 * (t - &c).norm_squared()), g: |t: &DVector<f64>| Ok(t - &c) };
        let opts = InnerOptions { step_tol: 1e-10, scaling, ..InnerOptions::default() };
        let r = projected_gradient_min(&mut obj, &bounds, &DVector::from_vec(vec![-0.9, 2.8]), &opts).unwrap();
        assert!(r.converged);
        assert!((&r.theta - &c).norm() <= 1e-8);
    }
}

#[test]
fn quadratic_outside_box_converges_to_projection() {
    let bounds = ParamBox::new(vec![0.0, 0.0], vec![1.0, 1.0]).unwrap();
    let c = DVector::from_vec(vec![2.0, 0.5]);
    let mut obj = FnObjective { f: |t: &DVector<f64>| Ok(0.5 * (t - &c).norm_squared()), g: |t: &DVector<f64>| Ok(t - &c) };
    let r = projected_gradient_min(&mut obj, &bounds, &DVector::from_vec(vec![0.1, 0.9]), &InnerOptions::default()).unwrap();
    assert!((&r.theta - DVector::from_vec(vec![1.0, 0.5])).norm() <= 1e-8);
}

#[test]
fn rosenbrock_descends_monotonically() {
    let bounds = ParamBox::new(vec![-2.0, -2.0], vec![2.0, 2.0]).unwrap();
    let mut obj = FnObjective {
        f: |t: &DVector<f64>| Ok((1.0 - t[0]).powi(2) + 100.0 * (t[1] - t[0] * t[0]).powi(2)),
        g: |t: &DVector<f64>| {
            Ok(DVector::from_vec(vec![
                -2.0 * (1.0 - t[0]) - 400.0 * t[0] * (t[1] - t[0] * t[0]),
                200.0 * (t[1] - t[0] * t[0]),
            ]))
        },
    };
    let opts = InnerOptions { max_iter: 2000, step_tol: 1e-12, scaling: Scaling::Identity, ..InnerOptions::default() };
    let mut values = vec![];
    let theta0 = DVector::from_vec(vec![-1.5, 1.5]);
    let r = projected_gradient_min_observed(&mut obj, &bounds, &theta0, &opts, &mut |s| values.push(s.value)).unwrap();
    assert!(values.len() > 10);
    assert!(values.windows(2).all(|w| w[1] <= w[0]));
    assert!(r.value < r.initial_value);
    assert!((&r.theta - DVector::from_vec(vec![1.0, 1.0])).norm() <= 1e-3);
}

#[test]
fn non_finite_objective_is_rejected() {
    let bounds = ParamBox::new(vec![0.0], vec![1.0]).unwrap();
    let mut obj = FnObjective { f: |_: &DVector<f64>| Ok(f64::NAN), g: |t: &DVector<f64>| Ok(t.clone()) };
    let r = projected_gradient_min(&mut obj, &bounds, &DVector::from_vec(vec![0.5]), &InnerOptions::default());
    assert!(matches!(r, Err(crate::Error::NumericalFailure(_))));
}

#[test]
fn restart_request_stops_after_one_step() {
    struct Once(usize);
    impl InnerObjective for Once {
        fn value(&mut self, t: &DVector<f64>) -> crate::Result<f64> {
            Ok(t.norm_squared())
        }
        fn gradient(&mut self, t: &DVector<f64>) -> crate::Result<DVector<f64>> {
            Ok(t * 2.0)
        }
        fn accepted(&mut self, _: &DVector<f64>) -> crate::Result<bool> {
            self.0 += 1;
            Ok(true)
        }
    }
    let bounds = ParamBox::new(vec![-1.0], vec![1.0]).unwrap();
    let mut obj = Once(0);
    let r = projected_gradient_min(&mut obj, &bounds, &DVector::from_vec(vec![0.8]), &InnerOptions::default()).unwrap();
    assert!(r.restart);
    assert_eq!((r.iterations, obj.0), (1, 1));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn inner_never_ends_above_start(
        c in proptest::collection::vec(-3.0..3.0f64, 3),
        w in proptest::collection::vec(0.1..10.0f64, 3),
        t0 in proptest::collection::vec(-1.0..1.0f64, 3),
        max_iter in 1usize..6,
    ) {
        let bounds = ParamBox::new(vec![-1.0; 3], vec![1.0; 3]).unwrap();
        let c = DVector::from_vec(c);
        let w = DVector::from_vec(w);
        // A nonconvex bump keeps the line search honest.
        let f = |t: &DVector<f64>| Ok((t - &c).component_mul(&w).dot(&(t - &c)) + (3.0 * t[0]).sin());
        let g = |t: &DVector<f64>| {
            let mut g = (t - &c).component_mul(&w) * 2.0;
            g[0] += 3.0 * (3.0 * t[0]).cos();
            Ok(g)
        };
        let mut obj = FnObjective { f, g };
        let theta0 = DVector::from_vec(t0);
        let opts = InnerOptions { max_iter, scaling: Scaling::Identity, ..InnerOptions::default() };
        let r = projected_gradient_min(&mut obj, &bounds, &theta0, &opts).unwrap();
        prop_assert!(r.value <= r.initial_value + 1e-12);
        prop_assert!(bounds.contains(r.theta.as_slice()));
        prop_assert!(r.iterations <= max_iter);
    }

    #[test]
    fn exact_mm_chain_holds(seed in 0u64..1000) {
        let p = small_deblur();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let anchor = random_theta(&p, &mut rng);
        let g = ExactSurrogate::new(&p, &anchor).unwrap();
        let n_psi = p.n_psi();
        let mut obj = FnObjective {
            f: |t: &DVector<f64>| g.value(&HyperParams::from_vector(t.clone(), n_psi)?),
            g: |t: &DVector<f64>| g.gradient(&HyperParams::from_vector(t.clone(), n_psi)?),
        };
        let r = projected_gradient_min(&mut obj, p.bounds(), anchor.vector(), &InnerOptions { max_iter: 3, ..InnerOptions::default() }).unwrap();
        let next = HyperParams::from_vector(r.theta.clone(), n_psi).unwrap();
        let f_next = eval_f_exact(&p, &next).unwrap().value;
        let g_next = g.value(&next).unwrap();
        let f_t = eval_f_exact(&p, &anchor).unwrap().value;
        prop_assert!(f_next <= g_next + 1e-9);
        prop_assert!(g_next <= g.value(&anchor).unwrap() + 1e-12);
        prop_assert!((g.value(&anchor).unwrap() - f_t).abs() <= 1e-10);
    }
}

#[test]
fn stationary_start_terminates_in_one_outer_iteration() {
    // Ψ = (s + θ) I; F is minimized at θ* = ‖b‖²/m − s.
    let m = 5;
    let s: f64 = 0.4;
    let b = DVector::from_vec(vec![1.0, -1.5, 2.0, 0.5, 1.0]);
    let p = noise_only_problem(DMatrix::identity(m, m) * s.sqrt(), DMatrix::identity(m, m), b.clone(), 0.01, 10.0).unwrap();
    let star = b.norm_squared() / m as f64 - s;
    let theta0 = p.params(&[star]).unwrap();
    let cfg = M3cConfig { n_probes: 4, ..M3cConfig::default() };
    let (theta, metrics) = m3c_optimize(&p, &theta0, &cfg).unwrap();
    assert_eq!(metrics.summary.termination, Termination::Converged);
    assert_eq!(metrics.summary.outer_iters, 1);
    assert!((theta.as_slice()[0] - star).abs() <= 1e-6 * star);
}

#[test]
fn exact_mode_is_monotone_and_ledger_is_exact() {
    let p = small_deblur();
    let theta0 = p.params(&[0.05, 2.0, 1.0, 0.0, 1.0]).unwrap();
    let cfg = M3cConfig {
        surrogate: SurrogateKind::Exact,
        max_outer: 8,
        max_inner: 3,
        audit: AuditConfig { safeguard: false, ..AuditConfig::default() },
        ..M3cConfig::default()
    };
    let before = p.ledger().snapshot();
    let (_, metrics) = m3c_optimize(&p, &theta0, &cfg).unwrap();
    let delta = p.ledger().snapshot() - before;
    let f: Vec<f64> = metrics.rows.iter().map(|r| r.f_audit.unwrap()).collect();
    assert!(f.len() >= 3);
    assert!(f.windows(2).all(|w| w[1] <= w[0] + 1e-12 * w[0].abs()), "{f:?}");
    assert!(f.last().unwrap() < &f[0]);
    assert_eq!(metrics.summary.total_matvecs_a, delta.a);
    assert_eq!(metrics.summary.total_matvecs_q, delta.q);
}

#[test]
fn monte_carlo_run_improves_and_counts_every_matvec() {
    let p = small_deblur();
    let theta0 = p.params(&[0.05, 2.0, 1.0, 0.0, 1.0]).unwrap();
    let f0 = eval_f_exact(&p, &theta0).unwrap().value;
    for policy in [ProbePolicy::FreshPerOuter, ProbePolicy::Reuse] {
        let cfg = M3cConfig { max_outer: 6, probe_policy: policy, preconditioner: Some(PreconditionerConfig { rank: 8 }), ..M3cConfig::default() };
        let before = p.ledger().snapshot();
        let (theta, metrics) = m3c_optimize(&p, &theta0, &cfg).unwrap();
        let delta = p.ledger().snapshot() - before;
        assert_eq!(metrics.summary.total_matvecs_a, delta.a);
        assert_eq!(metrics.summary.total_matvecs_q, delta.q);
        // Residuals and ∂A actions also charge A; ∂Q actions charge Q.
        assert!(delta.a >= 2 * delta.psi && delta.q >= delta.psi);
        assert!(eval_f_exact(&p, &theta).unwrap().value < f0);
        assert_eq!(metrics.summary.theta_hat, theta.as_slice().to_vec());
    }
}

#[test]
fn identical_seeds_reproduce_the_trajectory() {
    let p = small_deblur();
    let theta0 = p.params(&[0.05, 2.0, 1.0, 0.0, 1.0]).unwrap();
    let cfg = M3cConfig { max_outer: 3, gradient: GradientMode::FiniteDifference, ..M3cConfig::default() };
    let (_, a) = m3c_optimize(&p, &theta0, &cfg).unwrap();
    let (_, b) = m3c_optimize(&p, &theta0, &cfg).unwrap();
    let strip = |m: &crate::metrics::RunMetrics| m.rows.iter().map(|r| (r.theta.clone(), r.f_audit, r.matvecs_a)).collect::<Vec<_>>();
    assert_eq!(strip(&a), strip(&b));
}

#[test]
fn geometric_schedule_grows() {
    let s = SampleSchedule::Geometric { rho: 0.5 };
    assert_eq!((s.samples(3, 0), s.samples(3, 2)), (3, 12));
    assert_eq!(SampleSchedule::Constant.samples(7, 9), 7);
    let bad = M3cConfig { schedule: SampleSchedule::Geometric { rho: 1.5 }, ..M3cConfig::default() };
    assert!(bad.validate().is_err());
}

#[test]
fn config_rejects_unknown_keys() {
    let ok: M3cConfig = serde_json::from_str(r#"{"max_inner": 15, "gradient": "b"}"#).unwrap();
    assert_eq!((ok.max_inner, ok.gradient), (15, GradientMode::FiniteDifference));
    assert!(serde_json::from_str::<M3cConfig>(r#"{"max_iner": 15}"#).is_err());
}

#[test]
fn outside_start_is_rejected() {
    let p = identity_noise(4);
    let theta = HyperParams::new(&[50.0], &[]);
    assert!(m3c_optimize(&p, &theta, &M3cConfig::default()).is_err());
}

#[test]
fn rejection_at_probe_cap_stalls() {
    let p = small_deblur();
    let theta0 = p.params(&[0.05, 2.0, 1.0, 0.0, 1.0]).unwrap();
    let audit = AuditConfig { slack_rel: 0.0, ..AuditConfig::default() };
    let cfg = M3cConfig { n_probes: 2, max_probes: 4, max_outer: 60, max_inner: 5, outer_rel_tol: 1e-12, audit, ..M3cConfig::default() };
    let (_, metrics) = m3c_optimize(&p, &theta0, &cfg).unwrap();
    assert!(metrics.rows.iter().all(|r| r.n_probes <= 4));
    let last = metrics.rows.last().unwrap();
    assert!(!last.accepted && last.n_probes == 4);
    assert_eq!(metrics.summary.termination, Termination::Stalled);
    let rejected_below_cap = metrics.rows.iter().filter(|r| r.outer_iter > 0 && !r.accepted && r.n_probes < 4).count();
    assert!(rejected_below_cap <= 1);
    assert!(M3cConfig { max_probes: 1, ..M3cConfig::default() }.validate().is_err());
}
