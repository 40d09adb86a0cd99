use bls_core::instances::{make_inverse_lqr, make_quadratic_toy, make_ridge};
use bls_core::solvers::{optimize_upper, pca_landscape, OptimTrace};
use bls_core::{BilevelProblem, LowerConfig, TraceStatus, UpperConfig};

fn lower() -> LowerConfig {
    LowerConfig::with_tol(1e-12)
}

fn check_trace_invariants(trace: &OptimTrace) {
    for w in trace.records.windows(2) {
        assert!(w[1].cumulative_lower_solves >= w[0].cumulative_lower_solves);
        assert_eq!(
            w[1].cumulative_lower_solves - w[0].cumulative_lower_solves,
            w[1].lower_solves
        );
        assert!(
            w[1].f_u <= w[0].f_u,
            "f_U increased: {} -> {}",
            w[0].f_u,
            w[1].f_u
        );
        assert!(w[1].directional_derivative.unwrap() < 0.0);
        assert_eq!(w[1].iteration, w[0].iteration + 1);
    }
    assert!(trace.records[0].directional_derivative.is_none());
}

#[test]
fn newton_solves_the_quadratic_toy_in_few_steps() {
    let inst = make_quadratic_toy(4, 4, 2).unwrap();
    let trace = optimize_upper(
        &inst.problem,
        &inst.p0,
        &inst.z0,
        &lower(),
        &UpperConfig::newton(),
    )
    .unwrap();
    assert_eq!(trace.status, TraceStatus::Converged);
    assert!(trace.records.len() - 1 <= 3);
    assert!(trace.last().unwrap().f_u < 1e-12);
    check_trace_invariants(&trace);
}

#[test]
fn newton_needs_fewer_lower_solves_than_gradient_descent_on_ridge() {
    let inst = make_ridge(20, 100, 0).unwrap();
    let data = inst.regression.as_ref().unwrap();
    let (_, f_ref) = data.scan_ridge_optimum(-4.0, 4.0, 101).unwrap();
    let target = f_ref + 1e-6;
    let newton = optimize_upper(
        &inst.problem,
        &inst.p0,
        &inst.z0,
        &lower(),
        &UpperConfig::newton(),
    )
    .unwrap();
    let gd = optimize_upper(
        &inst.problem,
        &inst.p0,
        &inst.z0,
        &lower(),
        &UpperConfig::gradient_descent(),
    )
    .unwrap();
    check_trace_invariants(&newton);
    check_trace_invariants(&gd);
    let n = newton
        .solves_to_reach(target)
        .expect("newton reaches the reference");
    assert!(gd.solves_to_reach(target).is_none_or(|g| n < g));
}

#[test]
fn landscape_path_reproduces_the_trace() {
    let inst = make_inverse_lqr(2, 1, 10, Some(0.5), None, 0).unwrap();
    let p: Vec<f64> = inst
        .lqr
        .as_ref()
        .unwrap()
        .p_hidden
        .iter()
        .map(|v| 2.0 * v)
        .collect();
    let trace = optimize_upper(
        &inst.problem,
        &p,
        &inst.z0,
        &lower(),
        &UpperConfig::newton(),
    )
    .unwrap();
    check_trace_invariants(&trace);
    let land = pca_landscape(&trace, &inst.problem, &lower(), &inst.z0, 7, 1.5).unwrap();
    assert_eq!(land.grid.len(), 49);
    for (pp, rec) in land.path.iter().zip(&trace.records) {
        assert!((pp.f_u - rec.f_u).abs() <= 1e-9 * rec.f_u.abs().max(1.0));
    }
}

#[test]
fn unconstrained_lqr_landscape_is_a_bowl() {
    let inst = make_inverse_lqr(2, 1, 10, None, None, 0).unwrap();
    let trace = optimize_upper(
        &inst.problem,
        &inst.p0,
        &inst.z0,
        &lower(),
        &UpperConfig::gradient_descent(),
    )
    .unwrap();
    let land = pca_landscape(&trace, &inst.problem, &lower(), &inst.z0, 9, 1.5).unwrap();
    let c = land.count;
    for i in 1..c - 1 {
        for j in 1..c - 1 {
            let mid = land.value(i, j);
            let tol = 1e-9 * mid.abs().max(1.0);
            assert!(land.value(i - 1, j) + land.value(i + 1, j) - 2.0 * mid >= -tol);
            assert!(land.value(i, j - 1) + land.value(i, j + 1) - 2.0 * mid >= -tol);
        }
    }
}

/// `z* = ln p` exists only for `p > 0`.
fn log_problem() -> BilevelProblem {
    BilevelProblem::with_fixed_point(
        1,
        1,
        |z, _| Ok((z[0] + 5.0) * (z[0] + 5.0)),
        |z, p| Ok(vec![z[0].exp() - p[0]]),
    )
}

#[test]
fn lower_failure_mid_run_keeps_the_partial_trace() {
    let cfg = UpperConfig {
        step: 10.0,
        max_halvings: 0,
        ..UpperConfig::gradient_descent()
    };
    let lower = LowerConfig {
        max_iter: 50,
        ..lower()
    };
    let trace = optimize_upper(&log_problem(), &[1.0], &[0.0], &lower, &cfg).unwrap();
    assert!(
        matches!(trace.status, TraceStatus::LowerSolveFailure(_)),
        "{:?}",
        trace.status
    );
    assert!(trace.status.is_failure());
    assert_eq!(trace.records.len(), 1);
    assert_eq!(trace.records[0].f_u, 25.0);
}

#[test]
fn lower_failure_at_the_start_is_an_error() {
    let lower = LowerConfig {
        max_iter: 50,
        ..lower()
    };
    assert!(optimize_upper(
        &log_problem(),
        &[-1.0],
        &[0.0],
        &lower,
        &UpperConfig::newton()
    )
    .is_err());
}
