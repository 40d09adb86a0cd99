//! A-posteriori error bounds for implicit derivatives evaluated at an
//! inexact lower solution, and selection of the regularization level.
//!
//! Notation: `A = D_z k(z*, p)`, `Ã = D_z k(z, p)`, `B = D_p k(z*, p)`,
//! `B̃ = D_p k(z, p)`, `δ = ‖z − z*‖`.

use crate::error::{Error, Result};
use crate::ift::{ift_bracket, ift_hessian, ift_jacobian};
use crate::linalg::{min_gain, op_norm, Matrix};
use crate::problem::BilevelProblem;

/// Constants feeding the first-order, second-order and regularized bounds.
///
/// All fields are public so a caller can replace a measured value with a
/// known a-priori constant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundConstants {
    pub delta: f64,
    /// smallest singular value of `Ã`
    pub alpha1: f64,
    /// smallest singular value of `A`
    pub alpha2: f64,
    /// `‖B̃ − B‖_F / δ`
    pub beta: f64,
    /// `‖Ã − A‖_op / δ`
    pub gamma: f64,
    /// `‖B‖_F`
    pub r: f64,
    /// `‖H_p k(z) − H_p k(z*)‖_F / δ`
    pub zeta: f64,
    /// largest of the mixed-partial ratios `‖D_zp k(z) − D_zp k(z*)‖_F / δ`
    /// and `‖D_pz k(z) − D_pz k(z*)‖_F / δ`
    pub eta: f64,
    /// `‖H_z k(z) − H_z k(z*)‖_F / δ`
    pub nu: f64,
    /// first-order bound divided by `δ`
    pub kappa_j: f64,
    /// Frobenius norm of the implicit-Hessian bracket at `z*`
    pub r_h: f64,
    pub epsilon: f64,
}

impl BoundConstants {
    /// Constants of an exact solution: every difference term vanishes.
    pub fn exact(alpha: f64, r: f64, r_h: f64) -> Self {
        Self {
            delta: 0.0,
            alpha1: alpha,
            alpha2: alpha,
            beta: 0.0,
            gamma: 0.0,
            r,
            zeta: 0.0,
            eta: 0.0,
            nu: 0.0,
            kappa_j: 0.0,
            r_h,
            epsilon: 0.0,
        }
    }

    pub fn with_epsilon(mut self, epsilon: f64) -> Self {
        self.epsilon = epsilon;
        self
    }
}

fn ratio(diff: f64, delta: f64) -> f64 {
    if delta > 0.0 {
        diff / delta
    } else {
        0.0
    }
}

/// Measures the constants for the pair `(z, z_star)` at `p`.
///
/// Differences are realized for this pair, not uniform Lipschitz constants.
/// A singular `Ã` or `A` is reported as a zero gain; the bound functions
/// then return [`Error::InfiniteBound`].
pub fn estimate_constants(
    problem: &BilevelProblem,
    z: &[f64],
    z_star: &[f64],
    p: &[f64],
) -> Result<BoundConstants> {
    if z.len() != z_star.len() {
        return Err(Error::dims("estimate_constants", z_star.len(), z.len()));
    }
    let delta = crate::linalg::norm(&z.iter().zip(z_star).map(|(a, b)| a - b).collect::<Vec<_>>());

    let fb_star = problem.first_bundle(z_star, p)?;
    let fb = problem.first_bundle(z, p)?;
    let sb_star = problem.second_bundle(z_star, p)?;
    let sb = problem.second_bundle(z, p)?;

    let alpha1 = min_gain(&fb.dz_k)?.value;
    let alpha2 = min_gain(&fb_star.dz_k)?.value;
    let beta = ratio(fb.dp_k.sub(&fb_star.dp_k)?.frobenius_norm(), delta);
    let gamma = ratio(op_norm(&fb.dz_k.sub(&fb_star.dz_k)?), delta);
    let r = fb_star.dp_k.frobenius_norm();
    let zeta = ratio(sb.hp_k.sub(&sb_star.hp_k)?.frobenius_norm(), delta);
    let eta = ratio(
        sb.dzp_k
            .sub(&sb_star.dzp_k)?
            .frobenius_norm()
            .max(sb.dpz_k.sub(&sb_star.dpz_k)?.frobenius_norm()),
        delta,
    );
    let nu = ratio(sb.hz_k.sub(&sb_star.hz_k)?.frobenius_norm(), delta);

    let r_h = if alpha2 > 0.0 {
        let sens = ift_jacobian(&fb_star, 0.0)?;
        ift_bracket(&fb_star, &sb_star, &sens.dp_z)?.frobenius_norm()
    } else {
        f64::INFINITY
    };

    let mut c = BoundConstants {
        delta,
        alpha1,
        alpha2,
        beta,
        gamma,
        r,
        zeta,
        eta,
        nu,
        kappa_j: 0.0,
        r_h,
        epsilon: 0.0,
    };
    c.kappa_j = if alpha1 > 0.0 && alpha2 > 0.0 {
        kappa_j(&c)
    } else {
        f64::INFINITY
    };
    Ok(c)
}

/// `β/α₁ + γR/(α₁α₂)`: the first-order bound per unit `δ`.
pub fn kappa_j(c: &BoundConstants) -> f64 {
    c.beta / c.alpha1 + c.r * c.gamma / (c.alpha1 * c.alpha2)
}

fn require_gain(c: &BoundConstants) -> Result<()> {
    if !(c.alpha1 > 0.0) {
        return Err(Error::InfiniteBound("alpha1 is zero"));
    }
    if !(c.alpha2 > 0.0) {
        return Err(Error::InfiniteBound("alpha2 is zero"));
    }
    Ok(())
}

/// `βδ/α₁ + γRδ/(α₁α₂)`, a bound on `‖J̃ − J‖_F`.
pub fn first_order_bound(c: &BoundConstants) -> Result<f64> {
    require_gain(c)?;
    Ok(c.beta * c.delta / c.alpha1 + c.r * (c.gamma * c.delta) / (c.alpha1 * c.alpha2))
}

/// `(ζ + 2ηκ_J + νκ_J²)δ/α₁ + γR_Hδ/(α₁α₂)`, a bound on `‖H̃ − H‖_F`.
pub fn second_order_bound(c: &BoundConstants) -> Result<f64> {
    require_gain(c)?;
    let k = c.kappa_j;
    Ok(
        (c.zeta + 2.0 * c.eta * k + c.nu * k * k) * c.delta / c.alpha1
            + c.gamma * c.r_h * c.delta / (c.alpha1 * c.alpha2),
    )
}

/// `βδ/(α₁+ε) + R(γδ + ε)/((α₁+ε)α₂)`, a bound on `‖Ĵ − J‖_F` where `Ĵ`
/// is computed with `Ã + εI`. Assumes `vᵀÃv ≥ 0`.
pub fn regularized_bound(c: &BoundConstants) -> Result<f64> {
    if !(c.alpha2 > 0.0) {
        return Err(Error::InfiniteBound("alpha2 is zero"));
    }
    if !(c.epsilon >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "epsilon must be ≥ 0, got {}",
            c.epsilon
        )));
    }
    let a1 = c.alpha1 + c.epsilon;
    if !(a1 > 0.0) {
        return Err(Error::InfiniteBound("alpha1 + epsilon is zero"));
    }
    Ok(c.beta * c.delta / a1 + c.r * (c.gamma * c.delta + c.epsilon) / (a1 * c.alpha2))
}

/// Result of [`optimize_epsilon`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpsilonChoice {
    pub epsilon: f64,
    pub bound: f64,
    pub bound_at_zero: f64,
}

pub const EPSILON_GRID_POINTS: usize = 200;

/// Minimizes the regularized bound over `ε ∈ [0, eps_max]` by a
/// logarithmic grid scan of `[eps_max·1e-8, eps_max]` plus both endpoints.
pub fn optimize_epsilon(c: &BoundConstants, eps_max: f64) -> Result<EpsilonChoice> {
    if !(eps_max > 0.0) || !eps_max.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "eps_max must be finite and > 0, got {eps_max}"
        )));
    }
    let at = |eps: f64| regularized_bound(&c.with_epsilon(eps));
    let bound_at_zero = at(0.0)?;
    let mut best = (0.0, bound_at_zero);
    let lo = (eps_max * 1e-8).log10();
    let hi = eps_max.log10();
    let last = EPSILON_GRID_POINTS - 1;
    for i in 0..=last {
        let eps = if i == last {
            eps_max
        } else {
            10f64.powf(lo + (hi - lo) * i as f64 / last as f64)
        };
        let b = at(eps)?;
        if b < best.1 {
            best = (eps, b);
        }
    }
    Ok(EpsilonChoice {
        epsilon: best.0,
        bound: best.1,
        bound_at_zero,
    })
}

/// Realized implicit-derivative errors at an inexact point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RealizedErrors {
    /// `‖J̃ − J‖_F`
    pub jacobian: f64,
    /// `‖H̃ − H‖_F`
    pub hessian: f64,
}

/// Evaluates the implicit Jacobian and Hessian at `z` and at `z_star` (both
/// unregularized) and returns the Frobenius distances.
pub fn realized_errors(
    problem: &BilevelProblem,
    z: &[f64],
    z_star: &[f64],
    p: &[f64],
) -> Result<RealizedErrors> {
    let (j, h) = implicit_derivatives(problem, z_star, p, 0.0)?;
    let (jt, ht) = implicit_derivatives(problem, z, p, 0.0)?;
    Ok(RealizedErrors {
        jacobian: jt.sub(&j)?.frobenius_norm(),
        hessian: ht.sub(&h)?.frobenius_norm(),
    })
}

/// `‖Ĵ − J‖_F` with `Ĵ` computed at `z` using `D_z k + εI`.
pub fn realized_regularized_error(
    problem: &BilevelProblem,
    z: &[f64],
    z_star: &[f64],
    p: &[f64],
    epsilon: f64,
) -> Result<f64> {
    let j = ift_jacobian(&problem.first_bundle(z_star, p)?, 0.0)?.dp_z;
    let jh = ift_jacobian(&problem.first_bundle(z, p)?, epsilon)?.dp_z;
    Ok(jh.sub(&j)?.frobenius_norm())
}

fn implicit_derivatives(
    problem: &BilevelProblem,
    z: &[f64],
    p: &[f64],
    eps: f64,
) -> Result<(Matrix, Matrix)> {
    let fb = problem.first_bundle(z, p)?;
    let sb = problem.second_bundle(z, p)?;
    let sens = ift_jacobian(&fb, eps)?;
    let h = ift_hessian(&fb, &sb, &sens)?;
    Ok((sens.dp_z, h.into_data()))
}

/// `error ≤ bound` up to floating-point slack in the measured constants.
pub fn within_bound(error: f64, bound: f64) -> bool {
    error <= bound * (1.0 + 1e-10) + 1e-13
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit() -> BoundConstants {
        BoundConstants {
            delta: 0.1,
            alpha1: 1.0,
            alpha2: 1.0,
            beta: 1.0,
            gamma: 1.0,
            r: 1.0,
            zeta: 1.0,
            eta: 1.0,
            nu: 1.0,
            kappa_j: 2.0,
            r_h: 1.0,
            epsilon: 0.0,
        }
    }

    #[test]
    fn first_order_examples() {
        assert!((first_order_bound(&unit()).unwrap() - 0.2).abs() < 1e-15);
        let zero = BoundConstants {
            delta: 0.0,
            ..unit()
        };
        assert_eq!(first_order_bound(&zero).unwrap(), 0.0);
        let flat = BoundConstants {
            beta: 0.0,
            gamma: 0.0,
            ..unit()
        };
        assert_eq!(first_order_bound(&flat).unwrap(), 0.0);
    }

    #[test]
    fn second_order_examples() {
        assert!((second_order_bound(&unit()).unwrap() - 1.0).abs() < 1e-14);
        let zero = BoundConstants {
            delta: 0.0,
            ..unit()
        };
        assert_eq!(second_order_bound(&zero).unwrap(), 0.0);
        let linear = BoundConstants {
            zeta: 0.0,
            eta: 0.0,
            nu: 0.0,
            gamma: 0.0,
            ..unit()
        };
        assert_eq!(second_order_bound(&linear).unwrap(), 0.0);
    }

    #[test]
    fn regularized_examples() {
        let c = BoundConstants {
            delta: 0.0,
            epsilon: 1.0,
            ..unit()
        };
        assert_eq!(regularized_bound(&c).unwrap(), 0.5);
        for c in [
            unit(),
            BoundConstants {
                beta: 0.3,
                gamma: 7.0,
                alpha1: 0.2,
                ..unit()
            },
        ] {
            assert_eq!(
                regularized_bound(&c).unwrap(),
                first_order_bound(&c).unwrap()
            );
        }
    }

    #[test]
    fn regularization_helps_when_curvature_error_dominates() {
        let c = BoundConstants {
            beta: 0.0,
            gamma: 50.0,
            delta: 0.1,
            alpha1: 0.1,
            ..unit()
        };
        let b: Vec<f64> = [0.0, 0.1, 1.0]
            .iter()
            .map(|&e| regularized_bound(&c.with_epsilon(e)).unwrap())
            .collect();
        assert!(b[0] > b[1] && b[1] > b[2], "{b:?}");
    }

    #[test]
    fn zero_gain_is_infinite() {
        let c = BoundConstants {
            alpha1: 0.0,
            ..unit()
        };
        assert!(matches!(
            first_order_bound(&c),
            Err(Error::InfiniteBound(_))
        ));
        assert!(matches!(
            second_order_bound(&c),
            Err(Error::InfiniteBound(_))
        ));
        assert!(regularized_bound(&c.with_epsilon(0.5)).is_ok());
    }

    #[test]
    fn optimize_epsilon_never_worse_than_zero() {
        let cases = [
            unit(),
            BoundConstants {
                gamma: 0.0,
                ..unit()
            },
            BoundConstants {
                beta: 0.0,
                gamma: 50.0,
                ..unit()
            },
            BoundConstants {
                delta: 0.0,
                ..unit()
            },
        ];
        for c in cases {
            let e = optimize_epsilon(&c, 10.0).unwrap();
            assert!(e.bound <= e.bound_at_zero);
            assert!((0.0..=10.0).contains(&e.epsilon));
        }
        let e = optimize_epsilon(
            &BoundConstants {
                delta: 0.0,
                ..unit()
            },
            1.0,
        )
        .unwrap();
        assert_eq!((e.epsilon, e.bound), (0.0, 0.0));
        assert!(optimize_epsilon(&unit(), 0.0).is_err());
    }

    #[test]
    fn affine_ratio_is_monotone_so_optimum_sits_on_an_endpoint() {
        // β = 0: bound(ε) = R(γδ+ε)/((α₁+ε)α₂), monotone in ε
        let up = BoundConstants {
            beta: 0.0,
            gamma: 1.0,
            delta: 0.01,
            alpha1: 1.0,
            ..unit()
        };
        assert_eq!(optimize_epsilon(&up, 5.0).unwrap().epsilon, 0.0);
        let down = BoundConstants {
            beta: 0.0,
            gamma: 100.0,
            delta: 0.1,
            alpha1: 1.0,
            ..unit()
        };
        assert_eq!(optimize_epsilon(&down, 5.0).unwrap().epsilon, 5.0);
    }

    #[test]
    fn slack_check() {
        assert!(within_bound(0.0, 0.0));
        assert!(within_bound(1.0, 1.0));
        assert!(!within_bound(1.1, 1.0));
    }
}
