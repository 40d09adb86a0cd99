use bls_core::bounds::*;
use bls_core::instances::{make_diag_ridge, make_inverse_lqr, make_quadratic_toy, make_ridge};
use bls_core::solvers::solve_lower;
use bls_core::{LowerConfig, ProblemInstance};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn z_star(inst: &ProblemInstance, p: &[f64]) -> Vec<f64> {
    solve_lower(&inst.problem, p, &inst.z0, &LowerConfig::with_tol(1e-13))
        .unwrap()
        .z
}

fn perturb(rng: &mut ChaCha8Rng, z: &[f64], delta: f64) -> Vec<f64> {
    let u: Vec<f64> = (0..z.len())
        .map(|_| rng.sample(rand_distr::StandardNormal))
        .collect();
    let n = u.iter().map(|v| v * v).sum::<f64>().sqrt();
    z.iter().zip(&u).map(|(a, b)| a + delta * b / n).collect()
}

#[test]
fn exact_solution_has_zero_bounds() {
    let inst = make_ridge(8, 40, 0).unwrap();
    let zs = z_star(&inst, &inst.p0);
    let c = estimate_constants(&inst.problem, &zs, &zs, &inst.p0).unwrap();
    assert_eq!(c.delta, 0.0);
    assert_eq!(first_order_bound(&c).unwrap(), 0.0);
    assert_eq!(second_order_bound(&c).unwrap(), 0.0);
    let choice = optimize_epsilon(&c, 1.0).unwrap();
    assert_eq!((choice.epsilon, choice.bound), (0.0, 0.0));
}

#[test]
fn linear_optimality_conditions_give_zero_bounds() {
    let inst = make_quadratic_toy(4, 4, 1).unwrap();
    let zs = z_star(&inst, &inst.p0);
    let z: Vec<f64> = zs.iter().map(|v| v + 0.05).collect();
    let c = estimate_constants(&inst.problem, &z, &zs, &inst.p0).unwrap();
    assert_eq!((c.beta, c.gamma), (0.0, 0.0));
    assert_eq!(first_order_bound(&c).unwrap(), 0.0);
    let e = realized_errors(&inst.problem, &z, &zs, &inst.p0).unwrap();
    assert!(e.jacobian < 1e-14 && e.hessian < 1e-14);
}

#[test]
fn first_and_second_order_bounds_hold_on_ridge_models() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for inst in [
        make_ridge(20, 100, 1).unwrap(),
        make_diag_ridge(10, 100, 1).unwrap(),
    ] {
        let zs = z_star(&inst, &inst.p0);
        for delta in [1e-2, 1e-3, 1e-4] {
            for _ in 0..20 {
                let z = perturb(&mut rng, &zs, delta);
                let c = estimate_constants(&inst.problem, &z, &zs, &inst.p0).unwrap();
                let e = realized_errors(&inst.problem, &z, &zs, &inst.p0).unwrap();
                assert!(
                    within_bound(e.jacobian, first_order_bound(&c).unwrap()),
                    "{} δ={delta}",
                    inst.name
                );
                assert!(
                    within_bound(e.hessian, second_order_bound(&c).unwrap()),
                    "{} δ={delta}",
                    inst.name
                );
            }
        }
    }
}

#[test]
fn regularized_bound_holds_for_every_epsilon() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let inst = make_ridge(20, 100, 2).unwrap();
    let zs = z_star(&inst, &inst.p0);
    for delta in [1e-2, 1e-3] {
        let z = perturb(&mut rng, &zs, delta);
        let c = estimate_constants(&inst.problem, &z, &zs, &inst.p0).unwrap();
        for eps in [0.0, 1e-6, 1e-3, 1e-1, 1.0, 10.0] {
            let err = realized_regularized_error(&inst.problem, &z, &zs, &inst.p0, eps).unwrap();
            let bound = regularized_bound(&c.with_epsilon(eps)).unwrap();
            assert!(
                within_bound(err, bound),
                "δ={delta} ε={eps}: {err} > {bound}"
            );
        }
        let choice = optimize_epsilon(&c, 10.0).unwrap();
        assert!(choice.bound <= choice.bound_at_zero);
        assert_eq!(choice.bound_at_zero, first_order_bound(&c).unwrap());
    }
}

#[test]
fn bounds_are_linear_in_the_perturbation_size() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let inst = make_diag_ridge(10, 100, 3).unwrap();
    let zs = z_star(&inst, &inst.p0);
    let u = perturb(&mut rng, &vec![0.0; zs.len()], 1.0);
    let at = |d: f64| {
        let z: Vec<f64> = zs.iter().zip(&u).map(|(a, b)| a + d * b).collect();
        let c = estimate_constants(&inst.problem, &z, &zs, &inst.p0).unwrap();
        (
            first_order_bound(&c).unwrap(),
            second_order_bound(&c).unwrap(),
        )
    };
    let (a1, a2) = at(1e-5);
    let (b1, b2) = at(1e-2);
    assert!((b1 / a1).log10() / 3.0 >= 0.9);
    assert!((b2 / a2).log10() / 3.0 >= 0.9);
}

#[test]
fn barrier_bounds_hold_away_from_the_symmetric_point() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let inst = make_inverse_lqr(2, 1, 10, Some(1.0), Some(100.0), 0).unwrap();
    let p = inst.lqr.as_ref().unwrap().p_hidden.clone();
    let zs = z_star(&inst, &p);
    for delta in [1e-2, 1e-3, 1e-4] {
        for _ in 0..20 {
            let z = perturb(&mut rng, &zs, delta);
            let c = estimate_constants(&inst.problem, &z, &zs, &p).unwrap();
            let e = realized_errors(&inst.problem, &z, &zs, &p).unwrap();
            assert!(within_bound(e.jacobian, first_order_bound(&c).unwrap()));
            assert!(within_bound(e.hessian, second_order_bound(&c).unwrap()));
        }
    }
}

/// At `p = 0` the barrier solution is `z* = 0`, where the odd barrier
/// derivatives vanish: `γ` and the bracket norm are 0 and `κ_J = O(δ)`, so
/// the second-order expression is `O(δ³)` while the realized Hessian error
/// `≈ ‖H_z k(z)‖·‖J‖²/α₁` is `O(δ)`.
#[test]
fn second_order_bound_misses_the_symmetric_barrier_point() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let inst = make_inverse_lqr(2, 1, 10, Some(1.0), Some(100.0), 0).unwrap();
    let zs = z_star(&inst, &inst.p0);
    assert!(zs.iter().all(|v| v.abs() < 1e-12));
    let z = perturb(&mut rng, &zs, 1e-3);
    let c = estimate_constants(&inst.problem, &z, &zs, &inst.p0).unwrap();
    assert_eq!(c.r_h, 0.0);
    let e = realized_errors(&inst.problem, &z, &zs, &inst.p0).unwrap();
    assert!(within_bound(e.jacobian, first_order_bound(&c).unwrap()));
    assert!(e.hessian > 100.0 * second_order_bound(&c).unwrap());
}
