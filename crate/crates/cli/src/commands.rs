//! Subcommand bodies. Each seed (and method) runs as an independent task
//! writing its own files; shared summaries are assembled afterwards in
//! configuration order.

use std::path::PathBuf;

use bls_core::bounds::{
    estimate_constants, first_order_bound, optimize_epsilon, realized_errors,
    realized_regularized_error, regularized_bound, second_order_bound, within_bound,
};
use bls_core::solvers::{
    evaluate_landscape, loss_evaluator, optimize_upper, solve_lower, Landscape, PcaPlane,
};
use bls_core::{gradcheck, Error, OptimTrace, ProblemInstance};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::config::{Method, RunConfig};
use crate::output::{floats, indexed, Cell, Format, Table};
use crate::CliError;

pub struct Context {
    pub out: PathBuf,
    pub format: Format,
    pub pool: rayon::ThreadPool,
    pub expect_inexact: bool,
}

fn solver(what: impl std::fmt::Display, e: Error) -> CliError {
    CliError::Solver(format!("{what}: {e}"))
}

fn headers(fixed: &[&str], prefix: &str, n: usize) -> Vec<String> {
    fixed
        .iter()
        .map(|s| s.to_string())
        .chain(indexed(prefix, n))
        .collect()
}

fn trace_table(trace: &OptimTrace, dim_p: usize) -> Table {
    let mut t = Table::new(headers(
        &[
            "iteration",
            "lower_solve_count",
            "cumulative_lower_solves",
            "f_U",
            "grad_norm",
            "wall_ms",
        ],
        "p",
        dim_p,
    ));
    for r in &trace.records {
        let mut row = vec![
            Cell::from(r.iteration),
            r.lower_solves.into(),
            r.cumulative_lower_solves.into(),
            r.f_u.into(),
            r.grad_norm.into(),
            r.wall_ms.into(),
        ];
        row.extend(floats(&r.p));
        t.push(row);
    }
    t
}

fn status_text(trace: &OptimTrace) -> String {
    use bls_core::TraceStatus::*;
    match &trace.status {
        Converged => "converged".into(),
        MaxIterations => "max_iterations".into(),
        LineSearchFailure { backtracks } => {
            format!("line_search_failure after {backtracks} backtracks")
        }
        LowerSolveFailure(msg) => format!("lower_solve_failure: {msg}"),
        EvaluationFailure(msg) => format!("evaluation_failure: {msg}"),
    }
}

struct TuneRun {
    seed: u64,
    method: Method,
    dim_p: usize,
    outcome: Result<OptimTrace, Error>,
}

pub fn tune(cfg: &RunConfig, ctx: &Context) -> Result<(), CliError> {
    let jobs: Vec<(u64, Method)> = cfg
        .seeds
        .iter()
        .flat_map(|&s| cfg.methods.iter().map(move |&m| (s, m)))
        .collect();
    let lower = cfg.lower.resolve();
    let runs: Vec<TuneRun> = ctx.pool.install(|| {
        jobs.par_iter()
            .map(|&(seed, method)| {
                let inst = cfg.instance(seed)?;
                let outcome = optimize_upper(
                    &inst.problem,
                    &inst.p0,
                    &inst.z0,
                    &lower,
                    &cfg.upper.resolve(method),
                );
                if let Ok(trace) = &outcome {
                    trace_table(trace, inst.p0.len()).write(
                        &ctx.out,
                        &format!("trace_{}_seed{seed}", method.name()),
                        ctx.format,
                    )?;
                }
                Ok(TuneRun {
                    seed,
                    method,
                    dim_p: inst.p0.len(),
                    outcome,
                })
            })
            .collect::<Result<_, CliError>>()
    })?;

    let dim_p = runs.iter().map(|r| r.dim_p).max().unwrap_or(0);
    let mut summary = Table::new(headers(
        &[
            "seed",
            "method",
            "status",
            "iterations",
            "cumulative_lower_solves",
            "f_U",
            "grad_norm",
        ],
        "p",
        dim_p,
    ));
    let mut failures = Vec::new();
    for run in &runs {
        let mut row = vec![Cell::from(run.seed), run.method.name().into()];
        match &run.outcome {
            Ok(trace) => {
                let last = trace.last().expect("trace has its starting point");
                row.extend([
                    status_text(trace).into(),
                    Cell::from(last.iteration),
                    last.cumulative_lower_solves.into(),
                    last.f_u.into(),
                    last.grad_norm.into(),
                ]);
                row.extend(floats(&last.p));
                if trace.status.is_failure() {
                    failures.push(format!(
                        "seed {} {}: {}",
                        run.seed,
                        run.method.name(),
                        status_text(trace)
                    ));
                }
            }
            Err(e) => {
                row.push(format!("error: {e}").into());
                row.extend([Cell::Int(0), Cell::Int(0), f64::NAN.into(), f64::NAN.into()]);
                row.extend(std::iter::repeat_n(Cell::Float(f64::NAN), run.dim_p));
                failures.push(format!("seed {} {}: {e}", run.seed, run.method.name()));
            }
        }
        row.extend(std::iter::repeat_n(
            Cell::Float(f64::NAN),
            dim_p - run.dim_p,
        ));
        summary.push(row);
    }
    summary.write(&ctx.out, "summary", ctx.format)?;
    if failures.is_empty() {
        Ok(())
    } else {
        Err(CliError::Solver(failures.join("; ")))
    }
}

pub fn gradcheck_cmd(cfg: &RunConfig, ctx: &Context) -> Result<(), CliError> {
    let lower = cfg.lower.resolve();
    let diff = cfg.gradcheck.diff()?;
    let tol = cfg.gradcheck.tolerances();
    let reports = ctx.pool.install(|| {
        cfg.seeds
            .par_iter()
            .map(|&seed| {
                let inst = cfg.instance(seed)?;
                let report = gradcheck(&inst.problem, &inst.p0, &inst.z0, &lower, &diff)
                    .map_err(|e| solver(format!("seed {seed}"), e))?;
                Ok((seed, inst.name, report))
            })
            .collect::<Result<Vec<_>, CliError>>()
    })?;

    let mut table = Table::new([
        "seed",
        "problem",
        "jacobian",
        "hessian",
        "total_gradient",
        "total_hessian",
        "lower_residual",
        "pass",
    ]);
    let mut breaches = Vec::new();
    for (seed, name, r) in &reports {
        let failed = r.breaches(&tol);
        println!(
            "seed {seed} {name}: jacobian {:.3e} hessian {:.3e} total_gradient {:.3e} total_hessian {:.3e} (residual {:.1e})",
            r.jacobian, r.hessian, r.total_gradient, r.total_hessian, r.residual
        );
        table.push(vec![
            Cell::from(*seed),
            name.as_str().into(),
            r.jacobian.into(),
            r.hessian.into(),
            r.total_gradient.into(),
            r.total_hessian.into(),
            r.residual.into(),
            failed.is_empty().into(),
        ]);
        breaches.extend(
            failed
                .into_iter()
                .map(|(q, v)| format!("seed {seed}: {q} error {v:.3e} above tolerance")),
        );
    }
    table.write(&ctx.out, "gradcheck", ctx.format)?;
    if breaches.is_empty() {
        return Ok(());
    }
    if ctx.expect_inexact {
        eprintln!("inexact (expected): {}", breaches.join("; "));
        return Ok(());
    }
    Err(CliError::Verification(breaches.join("; ")))
}

fn unit_direction(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    loop {
        let u: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            return u.into_iter().map(|v| v / norm).collect();
        }
    }
}

/// Least-squares slope of `log y` against `log x`; `NaN` when any `y ≤ 0`.
pub fn log_log_slope(x: &[f64], y: &[f64]) -> f64 {
    if x.len() < 2 || y.iter().any(|v| !(*v > 0.0)) {
        return f64::NAN;
    }
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx) * (a - mx)).sum();
    sxy / sxx
}

struct BoundRow {
    delta: f64,
    trial: usize,
    jac_err: f64,
    hess_err: f64,
    first: f64,
    second: f64,
    eps_star: f64,
    reg_zero: f64,
    reg_star: f64,
    reg_err: f64,
}

impl BoundRow {
    fn validity(&self) -> [bool; 3] {
        [
            within_bound(self.jac_err, self.first),
            within_bound(self.hess_err, self.second),
            within_bound(self.reg_err, self.reg_star),
        ]
    }
}

fn bound_study(
    cfg: &RunConfig,
    inst: &ProblemInstance,
    seed: u64,
) -> Result<Vec<BoundRow>, CliError> {
    let lower = cfg.lower.resolve();
    let p = &inst.p0;
    let z_star = solve_lower(&inst.problem, p, &inst.z0, &lower)
        .map_err(|e| solver("lower solve", e))?
        .z;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::new();
    for &delta in &cfg.bounds.deltas {
        for trial in 0..cfg.bounds.trials {
            let u = unit_direction(&mut rng, z_star.len());
            let z: Vec<f64> = z_star.iter().zip(&u).map(|(a, b)| a + delta * b).collect();
            let at = |what: &str, e: Error| solver(format!("seed {seed} δ={delta:e} {what}"), e);
            let c = estimate_constants(&inst.problem, &z, &z_star, p)
                .map_err(|e| at("constants", e))?;
            let e = realized_errors(&inst.problem, &z, &z_star, p).map_err(|e| at("errors", e))?;
            let choice = optimize_epsilon(&c, cfg.bounds.eps_max).map_err(|e| at("epsilon", e))?;
            let reg_err = realized_regularized_error(&inst.problem, &z, &z_star, p, choice.epsilon)
                .map_err(|e| at("regularized error", e))?;
            rows.push(BoundRow {
                delta,
                trial,
                jac_err: e.jacobian,
                hess_err: e.hessian,
                first: first_order_bound(&c).map_err(|e| at("first-order bound", e))?,
                second: second_order_bound(&c).map_err(|e| at("second-order bound", e))?,
                eps_star: choice.epsilon,
                reg_zero: regularized_bound(&c.with_epsilon(0.0))
                    .map_err(|e| at("regularized bound", e))?,
                reg_star: choice.bound,
                reg_err,
            });
        }
    }
    Ok(rows)
}

pub fn bounds(cfg: &RunConfig, ctx: &Context) -> Result<(), CliError> {
    let studies = ctx.pool.install(|| {
        cfg.seeds
            .par_iter()
            .map(|&seed| {
                let inst = cfg.instance(seed)?;
                Ok((seed, bound_study(cfg, &inst, seed)?))
            })
            .collect::<Result<Vec<_>, CliError>>()
    })?;

    let mut table = Table::new([
        "seed",
        "delta",
        "trial",
        "jacobian_error",
        "hessian_error",
        "first_order_bound",
        "second_order_bound",
        "epsilon_star",
        "regularized_bound_eps0",
        "regularized_bound_eps_star",
        "regularized_error_eps_star",
        "valid_first_order",
        "valid_second_order",
        "valid_regularized",
    ]);
    let mut summary = Table::new([
        "seed",
        "slope_first_order_bound",
        "slope_second_order_bound",
        "slope_jacobian_error",
        "slope_hessian_error",
        "all_valid",
    ]);
    let mut invalid = Vec::new();
    for (seed, rows) in &studies {
        for r in rows {
            let [v1, v2, v3] = r.validity();
            for (ok, what) in [
                (v1, "first-order"),
                (v2, "second-order"),
                (v3, "regularized"),
            ] {
                if !ok {
                    invalid.push(format!(
                        "seed {seed} δ={:e} trial {}: {what} bound violated",
                        r.delta, r.trial
                    ));
                }
            }
            table.push(vec![
                Cell::from(*seed),
                r.delta.into(),
                r.trial.into(),
                r.jac_err.into(),
                r.hess_err.into(),
                r.first.into(),
                r.second.into(),
                r.eps_star.into(),
                r.reg_zero.into(),
                r.reg_star.into(),
                r.reg_err.into(),
                v1.into(),
                v2.into(),
                v3.into(),
            ]);
        }
        let mean = |f: &dyn Fn(&BoundRow) -> f64| -> Vec<f64> {
            cfg.bounds
                .deltas
                .iter()
                .map(|d| {
                    let sel: Vec<f64> = rows.iter().filter(|r| r.delta == *d).map(f).collect();
                    sel.iter().sum::<f64>() / sel.len() as f64
                })
                .collect()
        };
        let d = &cfg.bounds.deltas;
        let all_valid = rows.iter().all(|r| r.validity().iter().all(|v| *v));
        summary.push(vec![
            Cell::from(*seed),
            log_log_slope(d, &mean(&|r| r.first)).into(),
            log_log_slope(d, &mean(&|r| r.second)).into(),
            log_log_slope(d, &mean(&|r| r.jac_err)).into(),
            log_log_slope(d, &mean(&|r| r.hess_err)).into(),
            all_valid.into(),
        ]);
    }
    table.write(&ctx.out, "bounds", ctx.format)?;
    summary.write(&ctx.out, "bounds_summary", ctx.format)?;
    if invalid.is_empty() {
        Ok(())
    } else {
        let shown = invalid.len().min(5);
        Err(CliError::Verification(format!(
            "{} bound violations, first: {}",
            invalid.len(),
            invalid[..shown].join("; ")
        )))
    }
}

struct Surface {
    label: String,
    land: Landscape,
}

pub fn landscape(cfg: &RunConfig, ctx: &Context) -> Result<(), CliError> {
    let results = ctx.pool.install(|| {
        cfg.seeds
            .par_iter()
            .map(|&seed| landscape_seed(cfg, ctx, seed))
            .collect::<Vec<_>>()
    });
    let mut errors = Vec::new();
    for r in results {
        match r {
            Ok(()) => {}
            Err(CliError::Solver(msg)) => errors.push(msg),
            Err(e) => return Err(e),
        }
    }
    if errors.is_empty() {
        Ok(())
    } else {
        Err(CliError::Solver(errors.join("; ")))
    }
}

fn landscape_seed(cfg: &RunConfig, ctx: &Context, seed: u64) -> Result<(), CliError> {
    let lower = cfg.lower.resolve();
    let inst = cfg.instance(seed)?;
    let trace = optimize_upper(
        &inst.problem,
        &inst.p0,
        &inst.z0,
        &lower,
        &cfg.upper.resolve(cfg.landscape.method),
    )
    .map_err(|e| solver(format!("seed {seed} trace"), e))?;
    trace_table(&trace, inst.p0.len()).write(
        &ctx.out,
        &format!("landscape_trace_seed{seed}"),
        ctx.format,
    )?;
    let path = trace.points();
    let plane = PcaPlane::fit(&path).map_err(|e| solver(format!("seed {seed}"), e))?;
    let (count, span) = (cfg.landscape.count, cfg.landscape.span);

    let mut surfaces = vec![Surface {
        label: "trace_problem".into(),
        land: evaluate_landscape(
            &plane,
            &path,
            count,
            span,
            loss_evaluator(&inst.problem, &lower, &inst.z0),
        )
        .map_err(|e| solver(format!("seed {seed} grid"), e))?,
    }];
    for &alpha in &cfg.landscape.alphas {
        let other = cfg
            .problem
            .build_with_alpha(seed, alpha)
            .map_err(|e| CliError::Config(format!("key `landscape.alphas`: {e}")))?;
        let land = evaluate_landscape(
            &plane,
            &path,
            count,
            span,
            loss_evaluator(&other.problem, &lower, &other.z0),
        )
        .map_err(|e| solver(format!("seed {seed} α={alpha:e} grid"), e))?;
        surfaces.push(Surface {
            label: format!("alpha_{alpha:e}"),
            land,
        });
    }
    if let Some(data) = inst
        .lqr
        .as_ref()
        .filter(|_| cfg.problem.is_constrained_lqr())
    {
        let land = evaluate_landscape(&plane, &path, count, span, |p| data.clamped_loss(p))
            .map_err(|e| solver(format!("seed {seed} clamped grid"), e))?;
        surfaces.push(Surface {
            label: "clamped".into(),
            land,
        });
    }

    let dim_p = inst.p0.len();
    let mut grid = Table::new(
        headers(&["surface", "u", "v"], "p", dim_p)
            .into_iter()
            .chain(["f_U".to_string()]),
    );
    for s in &surfaces {
        for g in &s.land.grid {
            let mut row = vec![Cell::from(s.label.as_str()), g.u.into(), g.v.into()];
            row.extend(floats(&g.p));
            row.push(g.f_u.into());
            grid.push(row);
        }
    }
    grid.write(&ctx.out, &format!("landscape_grid_seed{seed}"), ctx.format)?;

    let mut path_table = Table::new(["iteration", "u", "v", "off_plane", "f_U", "trace_f_U"]);
    for (pp, rec) in surfaces[0].land.path.iter().zip(&trace.records) {
        path_table.push(vec![
            Cell::from(rec.iteration),
            pp.u.into(),
            pp.v.into(),
            pp.off_plane.into(),
            pp.f_u.into(),
            rec.f_u.into(),
        ]);
    }
    path_table.write(&ctx.out, &format!("landscape_path_seed{seed}"), ctx.format)?;

    let clamped_argmin = surfaces
        .iter()
        .find(|s| s.label == "clamped")
        .and_then(|s| s.land.argmin())
        .map(|g| g.p.clone());
    let mut summary = Table::new(headers(
        &[
            "surface",
            "argmin_u",
            "argmin_v",
            "argmin_f_U",
            "distance_to_clamped_argmin",
            "degenerate",
        ],
        "argmin_p",
        dim_p,
    ));
    for s in &surfaces {
        let best = s
            .land
            .argmin()
            .ok_or_else(|| CliError::Solver(format!("seed {seed}: empty grid")))?;
        let dist = clamped_argmin.as_ref().map_or(f64::NAN, |c| {
            c.iter()
                .zip(&best.p)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt()
        });
        let mut row = vec![
            Cell::from(s.label.as_str()),
            best.u.into(),
            best.v.into(),
            best.f_u.into(),
            dist.into(),
            plane.degenerate.into(),
        ];
        row.extend(floats(&best.p));
        summary.push(row);
    }
    summary.write(
        &ctx.out,
        &format!("landscape_summary_seed{seed}"),
        ctx.format,
    )?;

    if plane.degenerate {
        return Err(CliError::Solver(format!(
            "seed {seed}: optimization path is one-dimensional; wrote a 1-D slice"
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slope_of_a_power_law() {
        let x = [1e-4, 1e-3, 1e-2];
        let y: Vec<f64> = x.iter().map(|v: &f64| 3.0 * v.powi(2)).collect();
        assert!((log_log_slope(&x, &y) - 2.0).abs() < 1e-12);
        assert!(log_log_slope(&x, &[0.0, 1.0, 2.0]).is_nan());
    }
}
