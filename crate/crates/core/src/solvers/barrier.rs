use std::sync::Arc;

use crate::error::{Error, Result};
use crate::problem::{scalar_fn, ScalarFn};

pub type ConstraintFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

/// Inequality constraints `c_i(z) ≤ 0` smoothed by `−log(−α·c_i)/α`.
#[derive(Clone)]
pub struct BarrierSpec {
    pub constraints: Vec<ConstraintFn>,
    pub alpha: f64,
}

impl BarrierSpec {
    pub fn new(alpha: f64) -> Result<Self> {
        if !(alpha > 0.0) || !alpha.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "barrier alpha must be > 0, got {alpha}"
            )));
        }
        Ok(Self {
            constraints: Vec::new(),
            alpha,
        })
    }

    pub fn with_constraint(mut self, c: impl Fn(&[f64]) -> f64 + Send + Sync + 'static) -> Self {
        self.constraints.push(Arc::new(c));
        self
    }

    /// `Σ −log(−α·c_i(z))/α`, or `+∞` when any constraint is not strictly
    /// satisfied.
    pub fn penalty(&self, z: &[f64]) -> f64 {
        let mut total = 0.0;
        for c in &self.constraints {
            let v = c(z);
            if !(v < 0.0) {
                return f64::INFINITY;
            }
            total -= (-self.alpha * v).ln() / self.alpha;
        }
        total
    }

    pub fn is_strictly_feasible(&self, z: &[f64]) -> bool {
        self.constraints.iter().all(|c| c(z) < 0.0)
    }
}

/// Adds the barrier penalty of `spec` to a lower objective.
pub fn apply_barrier(f_l: ScalarFn, spec: BarrierSpec) -> ScalarFn {
    scalar_fn(move |z, p| {
        let pen = spec.penalty(z);
        if pen == f64::INFINITY {
            return Ok(f64::INFINITY);
        }
        Ok(f_l(z, p)? + pen)
    })
}

/// Box `|z_i| ≤ limit` as two barrier terms per coordinate, with analytic
/// derivatives of the penalty.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxBarrier {
    pub limit: f64,
    pub alpha: f64,
}

impl BoxBarrier {
    pub fn new(limit: f64, alpha: f64) -> Result<Self> {
        if !(limit > 0.0) || !(alpha > 0.0) || !limit.is_finite() || !alpha.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "invalid box barrier: limit {limit}, alpha {alpha}"
            )));
        }
        Ok(Self { limit, alpha })
    }

    fn gaps(&self, u: f64) -> Option<(f64, f64)> {
        let (up, lo) = (self.limit - u, u + self.limit);
        (up > 0.0 && lo > 0.0).then_some((up, lo))
    }

    pub fn value(&self, z: &[f64]) -> f64 {
        let a = self.alpha;
        z.iter()
            .map(|&u| match self.gaps(u) {
                Some((up, lo)) => -((a * up).ln() + (a * lo).ln()) / a,
                None => f64::INFINITY,
            })
            .sum()
    }

    pub fn gradient(&self, z: &[f64]) -> Vec<f64> {
        let a = self.alpha;
        z.iter()
            .map(|&u| match self.gaps(u) {
                Some((up, lo)) => 1.0 / (a * up) - 1.0 / (a * lo),
                None => f64::INFINITY,
            })
            .collect()
    }

    /// Diagonal of the (diagonal) Hessian.
    pub fn hessian_diag(&self, z: &[f64]) -> Vec<f64> {
        let a = self.alpha;
        z.iter()
            .map(|&u| match self.gaps(u) {
                Some((up, lo)) => 1.0 / (a * up * up) + 1.0 / (a * lo * lo),
                None => f64::INFINITY,
            })
            .collect()
    }

    /// Diagonal third derivatives `∂³/∂z_i³`.
    pub fn third_diag(&self, z: &[f64]) -> Vec<f64> {
        let a = self.alpha;
        z.iter()
            .map(|&u| match self.gaps(u) {
                Some((up, lo)) => 2.0 / (a * up.powi(3)) - 2.0 / (a * lo.powi(3)),
                None => f64::INFINITY,
            })
            .collect()
    }

    pub fn spec(&self, dim: usize) -> BarrierSpec {
        let mut spec = BarrierSpec {
            constraints: Vec::new(),
            alpha: self.alpha,
        };
        for i in 0..dim {
            let l = self.limit;
            spec = spec
                .with_constraint(move |z| z[i] - l)
                .with_constraint(move |z| -z[i] - l);
        }
        spec
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::derivatives::gradient_fd;

    #[test]
    fn no_constraints_leave_objective_unchanged() {
        let f = apply_barrier(
            scalar_fn(|z, _| Ok(z[0] * 3.0)),
            BarrierSpec::new(2.0).unwrap(),
        );
        assert_eq!(f(&[1.5], &[]).unwrap(), 4.5);
    }

    #[test]
    fn penalty_vanishes_where_log_argument_is_one() {
        let spec = BarrierSpec::new(1.0)
            .unwrap()
            .with_constraint(|z| z[0] - 1.0);
        let f = apply_barrier(scalar_fn(|_, _| Ok(2.0)), spec);
        assert_eq!(f(&[0.0], &[]).unwrap(), 2.0);
    }

    #[test]
    fn infeasible_points_are_infinite() {
        let spec = BarrierSpec::new(10.0)
            .unwrap()
            .with_constraint(|z| z[0] - 1.0);
        let f = apply_barrier(scalar_fn(|_, _| Ok(0.0)), spec);
        assert_eq!(f(&[1.0], &[]).unwrap(), f64::INFINITY);
        assert_eq!(f(&[3.0], &[]).unwrap(), f64::INFINITY);
        assert!(BarrierSpec::new(0.0).is_err());
    }

    #[test]
    fn box_derivatives_match_differences() {
        let b = BoxBarrier::new(1.5, 10.0).unwrap();
        let z = [0.3, -1.2, 1.1];
        let g = gradient_fd(|x| Ok(b.value(x)), &z, 1e-6).unwrap();
        for (a, e) in b.gradient(&z).iter().zip(&g) {
            assert!((a - e).abs() < 1e-7, "{a} vs {e}");
        }
        for i in 0..3 {
            let h = gradient_fd(|x| Ok(b.gradient(x)[i]), &z, 1e-6).unwrap();
            assert!((b.hessian_diag(&z)[i] - h[i]).abs() < 1e-6);
            let t = gradient_fd(|x| Ok(b.hessian_diag(x)[i]), &z, 1e-6).unwrap();
            assert!((b.third_diag(&z)[i] - t[i]).abs() < 1e-5 * t[i].abs().max(1.0));
        }
    }

    #[test]
    fn box_matches_generic_spec() {
        let b = BoxBarrier::new(2.0, 316.0).unwrap();
        let z = [0.5, -1.9];
        assert!((b.value(&z) - b.spec(2).penalty(&z)).abs() < 1e-14);
        assert_eq!(b.value(&[2.0, 0.0]), f64::INFINITY);
    }
}
