use std::time::Instant;

use super::lower::{lower_solve_count, solve_lower, LowerConfig};
use crate::error::{Error, Result};
use crate::ift::{ift_jacobian, total_gradient, total_hessian, HessianMode, HessianStrategy};
use crate::linalg::{cholesky, cholesky_solve, dot, norm, Matrix};
use crate::problem::BilevelProblem;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpperMethod {
    GradientDescent,
    Newton,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UpperConfig {
    pub method: UpperMethod,
    /// Gradient-descent step before halving.
    pub step: f64,
    pub max_halvings: usize,
    pub lambda0: f64,
    pub lambda_increase: f64,
    pub lambda_decrease: f64,
    pub armijo: f64,
    pub max_backtracks: usize,
    pub max_iter: usize,
    pub grad_tol: f64,
    pub f_tol: f64,
    pub hessian_mode: HessianMode,
}

impl Default for UpperConfig {
    fn default() -> Self {
        Self {
            method: UpperMethod::Newton,
            step: 1e-2,
            max_halvings: 10,
            lambda0: 1e-6,
            lambda_increase: 10.0,
            lambda_decrease: 3.0,
            armijo: 1e-4,
            max_backtracks: 40,
            max_iter: 100,
            grad_tol: 1e-7,
            f_tol: 1e-12,
            hessian_mode: HessianMode::General,
        }
    }
}

impl UpperConfig {
    pub fn newton() -> Self {
        Self::default()
    }

    pub fn gradient_descent() -> Self {
        Self {
            method: UpperMethod::GradientDescent,
            max_iter: 500,
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<()> {
        let positive = [
            self.step,
            self.lambda0,
            self.armijo,
            self.grad_tol,
            self.f_tol,
        ];
        if positive.iter().any(|v| !(*v > 0.0))
            || self.lambda_increase <= 1.0
            || self.lambda_decrease <= 1.0
        {
            return Err(Error::InvalidArgument(format!(
                "invalid upper config {self:?}"
            )));
        }
        Ok(())
    }
}

/// One outer iterate.
#[derive(Debug, Clone, PartialEq)]
pub struct IterRecord {
    pub iteration: usize,
    pub p: Vec<f64>,
    pub f_u: f64,
    pub grad_norm: f64,
    /// lower solves spent reaching this iterate
    pub lower_solves: u64,
    pub cumulative_lower_solves: u64,
    pub wall_ms: f64,
    /// `gᵀd` of the accepted step that produced this iterate
    pub directional_derivative: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum TraceStatus {
    Converged,
    MaxIterations,
    LineSearchFailure { backtracks: usize },
    LowerSolveFailure(String),
    EvaluationFailure(String),
}

impl TraceStatus {
    pub fn is_failure(&self) -> bool {
        !matches!(self, TraceStatus::Converged | TraceStatus::MaxIterations)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimTrace {
    pub method: UpperMethod,
    pub records: Vec<IterRecord>,
    pub status: TraceStatus,
    /// lower solution at the last recorded iterate
    pub z: Vec<f64>,
}

impl OptimTrace {
    pub fn last(&self) -> Option<&IterRecord> {
        self.records.last()
    }

    pub fn total_lower_solves(&self) -> u64 {
        self.records.last().map_or(0, |r| r.cumulative_lower_solves)
    }

    /// Cumulative lower solves at the first iterate with `f_u ≤ target`.
    pub fn solves_to_reach(&self, target: f64) -> Option<u64> {
        self.records
            .iter()
            .find(|r| r.f_u <= target)
            .map(|r| r.cumulative_lower_solves)
    }

    pub fn points(&self) -> Vec<Vec<f64>> {
        self.records.iter().map(|r| r.p.clone()).collect()
    }
}

struct Point {
    p: Vec<f64>,
    z: Vec<f64>,
    f: f64,
    g: Vec<f64>,
}

fn evaluate(
    problem: &BilevelProblem,
    p: &[f64],
    z_warm: &[f64],
    lower: &LowerConfig,
) -> std::result::Result<(Vec<f64>, f64), Error> {
    let sol = solve_lower(problem, p, z_warm, lower)?;
    let f = problem.upper_value(&sol.z, p)?;
    if !f.is_finite() {
        return Err(Error::NonFinite("upper objective".into()));
    }
    Ok((sol.z, f))
}

fn gradient(problem: &BilevelProblem, z: &[f64], p: &[f64]) -> Result<Vec<f64>> {
    let fb = problem.first_bundle(z, p)?;
    let sens = ift_jacobian(&fb, 0.0)?;
    Ok(total_gradient(&fb, &sens)?.into_vec())
}

fn hessian(problem: &BilevelProblem, z: &[f64], p: &[f64], mode: HessianMode) -> Result<Matrix> {
    let fb = problem.first_bundle(z, p)?;
    let sb = problem.second_bundle(z, p)?;
    let sens = ift_jacobian(&fb, 0.0)?;
    total_hessian(&fb, &sb, &sens, mode, HessianStrategy::Fast)
}

/// Minimizes `p ↦ f_U(z*(p), p)` by gradient descent or Levenberg-damped
/// Newton with Armijo acceptance. Every lower solve is warm-started from the
/// previous accepted `z*` and counted in the trace.
///
/// Failures after the first point end the run with a failure status and the
/// partial trace; only a failure at `p0` is returned as an error.
pub fn optimize_upper(
    problem: &BilevelProblem,
    p0: &[f64],
    z0: &[f64],
    lower: &LowerConfig,
    cfg: &UpperConfig,
) -> Result<OptimTrace> {
    cfg.validate()?;
    let start = Instant::now();
    let counter0 = lower_solve_count();
    let mut last_count = counter0;
    let mut take_solves = || {
        let now = lower_solve_count();
        let spent = now - last_count;
        last_count = now;
        (spent, now - counter0)
    };

    let (z, f) = evaluate(problem, p0, z0, lower)?;
    let g = gradient(problem, &z, p0)?;
    let mut cur = Point {
        p: p0.to_vec(),
        z,
        f,
        g,
    };
    let (spent, cumulative) = take_solves();
    let mut records = vec![IterRecord {
        iteration: 0,
        p: cur.p.clone(),
        f_u: cur.f,
        grad_norm: norm(&cur.g),
        lower_solves: spent,
        cumulative_lower_solves: cumulative,
        wall_ms: start.elapsed().as_secs_f64() * 1e3,
        directional_derivative: None,
    }];
    let mut lambda = cfg.lambda0;

    let finish = |records: Vec<IterRecord>, status, z: Vec<f64>| OptimTrace {
        method: cfg.method,
        records,
        status,
        z,
    };

    for it in 1..=cfg.max_iter {
        if norm(&cur.g) <= cfg.grad_tol {
            return Ok(finish(records, TraceStatus::Converged, cur.z));
        }
        let step = match cfg.method {
            UpperMethod::GradientDescent => gd_step(problem, &cur, lower, cfg),
            UpperMethod::Newton => newton_step(problem, &cur, lower, cfg, &mut lambda),
        };
        let (next, gtd) = match step {
            Ok(v) => v,
            Err(status) => return Ok(finish(records, status, cur.z)),
        };
        let decrease = cur.f - next.f;
        cur = next;
        let (spent, cumulative) = take_solves();
        records.push(IterRecord {
            iteration: it,
            p: cur.p.clone(),
            f_u: cur.f,
            grad_norm: norm(&cur.g),
            lower_solves: spent,
            cumulative_lower_solves: cumulative,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
            directional_derivative: Some(gtd),
        });
        if norm(&cur.g) <= cfg.grad_tol || decrease < cfg.f_tol {
            return Ok(finish(records, TraceStatus::Converged, cur.z));
        }
    }
    Ok(finish(records, TraceStatus::MaxIterations, cur.z))
}

fn complete(
    problem: &BilevelProblem,
    p: Vec<f64>,
    z: Vec<f64>,
    f: f64,
) -> std::result::Result<Point, TraceStatus> {
    let g = gradient(problem, &z, &p).map_err(|e| TraceStatus::EvaluationFailure(e.to_string()))?;
    Ok(Point { p, z, f, g })
}

fn gd_step(
    problem: &BilevelProblem,
    cur: &Point,
    lower: &LowerConfig,
    cfg: &UpperConfig,
) -> std::result::Result<(Point, f64), TraceStatus> {
    let mut t = cfg.step;
    let gtd = -t * dot(&cur.g, &cur.g);
    let mut lower_failures = Vec::new();
    for _ in 0..=cfg.max_halvings {
        let p: Vec<f64> = cur
            .p
            .iter()
            .zip(&cur.g)
            .map(|(pi, gi)| pi - t * gi)
            .collect();
        match evaluate(problem, &p, &cur.z, lower) {
            Ok((z, f)) if f <= cur.f => {
                return Ok((complete(problem, p, z, f)?, gtd * t / cfg.step))
            }
            Ok(_) => t *= 0.5,
            Err(e @ (Error::LowerSolve { .. } | Error::NonFinite(_))) => {
                lower_failures.push(e.to_string());
                t *= 0.5;
            }
            Err(e) => return Err(TraceStatus::EvaluationFailure(e.to_string())),
        }
    }
    Err(line_search_status(cfg.max_halvings + 1, lower_failures))
}

/// A line search in which every trial failed to solve the lower problem is
/// reported as a lower-solve failure.
fn line_search_status(trials: usize, lower_failures: Vec<String>) -> TraceStatus {
    if lower_failures.len() >= trials {
        TraceStatus::LowerSolveFailure(lower_failures.last().cloned().unwrap_or_default())
    } else {
        TraceStatus::LineSearchFailure { backtracks: trials }
    }
}

fn newton_step(
    problem: &BilevelProblem,
    cur: &Point,
    lower: &LowerConfig,
    cfg: &UpperConfig,
    lambda: &mut f64,
) -> std::result::Result<(Point, f64), TraceStatus> {
    let h = hessian(problem, &cur.z, &cur.p, cfg.hessian_mode)
        .map_err(|e| TraceStatus::EvaluationFailure(e.to_string()))?;
    let mut backtracks = 0;
    let mut lower_failures = Vec::new();
    loop {
        if !lambda.is_finite() {
            return Err(TraceStatus::LineSearchFailure { backtracks });
        }
        let damped = h
            .add_diagonal(*lambda)
            .map_err(|e| TraceStatus::EvaluationFailure(e.to_string()))?;
        let Some(l) = cholesky(&damped) else {
            *lambda *= cfg.lambda_increase;
            continue;
        };
        let d: Vec<f64> = cholesky_solve(&l, &cur.g).into_iter().map(|v| -v).collect();
        let gtd = dot(&cur.g, &d);
        assert!(
            gtd < 0.0 || norm(&cur.g) == 0.0,
            "Newton direction is not a descent direction"
        );
        let p: Vec<f64> = cur.p.iter().zip(&d).map(|(a, b)| a + b).collect();
        match evaluate(problem, &p, &cur.z, lower) {
            Ok((z, f)) if f <= cur.f + cfg.armijo * gtd => {
                *lambda = (*lambda / cfg.lambda_decrease).max(f64::MIN_POSITIVE);
                return Ok((complete(problem, p, z, f)?, gtd));
            }
            Ok(_) => {}
            Err(e @ (Error::LowerSolve { .. } | Error::NonFinite(_))) => {
                lower_failures.push(e.to_string())
            }
            Err(e) => return Err(TraceStatus::EvaluationFailure(e.to_string())),
        }
        *lambda *= cfg.lambda_increase;
        backtracks += 1;
        if backtracks >= cfg.max_backtracks {
            return Err(line_search_status(backtracks, lower_failures));
        }
    }
}
