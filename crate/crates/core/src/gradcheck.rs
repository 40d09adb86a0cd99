//! Finite-difference checks of the implicit and total derivatives at one
//! parameter point.

use crate::derivatives::{
    jacobian_fd, stacked_jacobian_fd, total_gradient_fd, total_hessian_fd, DiffConfig,
};
use crate::error::Result;
use crate::ift::{
    ift_hessian, ift_jacobian, total_gradient, total_hessian, HessianMode, HessianStrategy,
};
use crate::linalg::relative_error;
use crate::problem::BilevelProblem;
use crate::solvers::{solve_lower, LowerConfig};

/// Relative errors of the analytic quantities against their differences.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradcheckReport {
    /// `D_p z*` vs differences of re-solved `z*`
    pub jacobian: f64,
    /// `H_p z*` vs differences of `D_p z*`
    pub hessian: f64,
    pub total_gradient: f64,
    pub total_hessian: f64,
    /// `‖k(z*, p)‖` of the lower solution used
    pub residual: f64,
}

/// Acceptance thresholds per quantity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradcheckTolerances {
    pub jacobian: f64,
    pub hessian: f64,
    pub total_gradient: f64,
    pub total_hessian: f64,
}

impl Default for GradcheckTolerances {
    fn default() -> Self {
        Self {
            jacobian: 1e-5,
            hessian: 1e-4,
            total_gradient: 1e-5,
            total_hessian: 1e-4,
        }
    }
}

impl GradcheckReport {
    /// Names and values of the quantities above tolerance.
    pub fn breaches(&self, tol: &GradcheckTolerances) -> Vec<(&'static str, f64)> {
        [
            ("jacobian", self.jacobian, tol.jacobian),
            ("hessian", self.hessian, tol.hessian),
            ("total_gradient", self.total_gradient, tol.total_gradient),
            ("total_hessian", self.total_hessian, tol.total_hessian),
        ]
        .into_iter()
        .filter(|(_, v, t)| !(v <= t))
        .map(|(name, v, _)| (name, v))
        .collect()
    }
}

/// Solves the lower problem at `p` and compares the implicit Jacobian,
/// implicit Hessian and total derivatives with central differences that
/// re-solve the lower problem, warm-started at `z*`.
pub fn gradcheck(
    problem: &BilevelProblem,
    p: &[f64],
    z0: &[f64],
    lower: &LowerConfig,
    diff: &DiffConfig,
) -> Result<GradcheckReport> {
    let sol = solve_lower(problem, p, z0, lower)?;
    let z_star = sol.z;
    let resolve = |q: &[f64]| solve_lower(problem, q, &z_star, lower).map(|s| s.z);

    let fb = problem.first_bundle(&z_star, p)?;
    let sb = problem.second_bundle(&z_star, p)?;
    let sens = ift_jacobian(&fb, 0.0)?;

    let j_fd = jacobian_fd(resolve, p, diff.first_step)?;
    let jacobian = relative_error(sens.dp_z.as_slice(), j_fd.as_slice());

    let h = ift_hessian(&fb, &sb, &sens)?;
    let h_fd = stacked_jacobian_fd(
        |q| {
            let z = resolve(q)?;
            Ok(ift_jacobian(&problem.first_bundle(&z, q)?, 0.0)?.dp_z)
        },
        p,
        diff,
    )?;
    let hessian = relative_error(h.data().as_slice(), h_fd.data().as_slice());

    let g = total_gradient(&fb, &sens)?;
    let g_fd = total_gradient_fd(problem, p, resolve, diff)?;
    let th = total_hessian(&fb, &sb, &sens, HessianMode::General, HessianStrategy::Fast)?;
    let th_fd = total_hessian_fd(problem, p, resolve, diff)?;

    Ok(GradcheckReport {
        jacobian,
        hessian,
        total_gradient: relative_error(g.as_slice(), g_fd.as_slice()),
        total_hessian: relative_error(th.as_slice(), th_fd.as_slice()),
        residual: sol.residual_norm,
    })
}
