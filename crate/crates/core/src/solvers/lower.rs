use std::cell::Cell;

use crate::error::{Error, Result};
use crate::linalg::{factorize, norm};
use crate::problem::{BilevelProblem, LowerSolution};

/// Newton settings for the lower problem `k(z, p) = 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LowerConfig {
    /// Absolute threshold on `‖k(z, p)‖`.
    pub tol: f64,
    pub max_iter: usize,
    pub backtrack_factor: f64,
    /// Sufficient-decrease constant on `‖k‖²`.
    pub sufficient_decrease: f64,
    pub max_backtracks: usize,
}

impl Default for LowerConfig {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_iter: 200,
            backtrack_factor: 0.5,
            sufficient_decrease: 1e-4,
            max_backtracks: 50,
        }
    }
}

impl LowerConfig {
    pub fn with_tol(tol: f64) -> Self {
        Self {
            tol,
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0)
            || self.max_iter == 0
            || !(self.backtrack_factor > 0.0 && self.backtrack_factor < 1.0)
        {
            return Err(Error::InvalidArgument(format!(
                "invalid lower config {self:?}"
            )));
        }
        Ok(())
    }
}

thread_local! {
    static SOLVES: Cell<u64> = const { Cell::new(0) };
}

/// Number of [`solve_lower`] invocations on this thread so far.
pub fn lower_solve_count() -> u64 {
    SOLVES.with(Cell::get)
}

fn sq_norm(v: &[f64]) -> f64 {
    let n = norm(v);
    if n.is_finite() {
        n * n
    } else {
        f64::INFINITY
    }
}

/// Newton's method on `k(·, p)` with backtracking on `‖k‖²`.
///
/// Points where `k` is not finite (e.g. outside a barrier's domain) are
/// rejected by the line search. A singular `D_z k` is damped by
/// `λ = 1e-8·‖D_z k‖_F`.
pub fn solve_lower(
    problem: &BilevelProblem,
    p: &[f64],
    z0: &[f64],
    cfg: &LowerConfig,
) -> Result<LowerSolution> {
    SOLVES.with(|c| c.set(c.get() + 1));
    cfg.validate()?;
    if z0.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("initial lower iterate".into()));
    }
    let mut z = z0.to_vec();
    let mut k = problem.residual(&z, p)?;
    let mut merit = sq_norm(&k);
    if !merit.is_finite() {
        return Err(Error::LowerSolve {
            iterations: 0,
            residual: f64::INFINITY,
            reason: "optimality map is not finite at the initial point".into(),
        });
    }
    for it in 0..cfg.max_iter {
        if merit.sqrt() <= cfg.tol {
            return Ok(LowerSolution {
                z,
                residual_norm: merit.sqrt(),
                iterations: it,
                converged: true,
            });
        }
        let jac = problem.dz_k(&z, p)?;
        let mut f = factorize(&jac)?;
        if f.is_singular() {
            let lambda = 1e-8 * jac.frobenius_norm().max(1.0);
            f = factorize(&jac.add_diagonal(lambda)?)?;
        }
        let step = f.solve_vec(&k).map_err(|_| Error::LowerSolve {
            iterations: it,
            residual: merit.sqrt(),
            reason: "Newton system is singular".into(),
        })?;
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..=cfg.max_backtracks {
            let trial: Vec<f64> = z.iter().zip(&step).map(|(zi, di)| zi - t * di).collect();
            let kt = problem.residual(&trial, p)?;
            let mt = sq_norm(&kt);
            if mt <= (1.0 - 2.0 * cfg.sufficient_decrease * t) * merit {
                z = trial;
                k = kt;
                merit = mt;
                accepted = true;
                break;
            }
            t *= cfg.backtrack_factor;
        }
        if !accepted {
            return Err(Error::LowerSolve {
                iterations: it,
                residual: merit.sqrt(),
                reason: "line search made no progress".into(),
            });
        }
    }
    if merit.sqrt() <= cfg.tol {
        return Ok(LowerSolution {
            z,
            residual_norm: merit.sqrt(),
            iterations: cfg.max_iter,
            converged: true,
        });
    }
    Err(Error::LowerSolve {
        iterations: cfg.max_iter,
        residual: merit.sqrt(),
        reason: "iteration limit reached".into(),
    })
}
