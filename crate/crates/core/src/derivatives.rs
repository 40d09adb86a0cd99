//! Central finite differences for every partial the sensitivity formulas
//! consume, laid out in the stacked convention of [`StackedMatrix`].
//!
//! These routines are also the independent oracles that the implicit
//! derivatives are checked against: they only ever evaluate functions and
//! re-solve the lower problem, never the implicit-function formulas.

use crate::error::{Error, Result};
use crate::linalg::{Matrix, StackedMatrix};
use crate::problem::BilevelProblem;

/// Step sizes for central differences. The actual step for coordinate `i` is
/// `base·max(1, |x_i|)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiffConfig {
    pub first_step: f64,
    pub second_step: f64,
}

impl Default for DiffConfig {
    fn default() -> Self {
        Self {
            first_step: 1e-5,
            second_step: 1e-4,
        }
    }
}

impl DiffConfig {
    pub fn new(first_step: f64, second_step: f64) -> Result<Self> {
        if !(first_step > 0.0 && second_step > 0.0) {
            return Err(Error::InvalidArgument(
                "finite-difference steps must be positive".into(),
            ));
        }
        Ok(Self {
            first_step,
            second_step,
        })
    }
}

#[inline]
fn step(base: f64, x: f64) -> f64 {
    base * x.abs().max(1.0)
}

fn finite(v: Vec<f64>, what: &str) -> Result<Vec<f64>> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(v)
    } else {
        Err(Error::NumericDiff(format!(
            "non-finite evaluation in {what}"
        )))
    }
}

fn shifted(x: &[f64], i: usize, h: f64) -> Vec<f64> {
    let mut y = x.to_vec();
    y[i] += h;
    y
}

/// `∂f/∂x` by central differences, one column per coordinate of `x`.
pub fn jacobian_fd<F>(f: F, x: &[f64], step_base: f64) -> Result<Matrix>
where
    F: Fn(&[f64]) -> Result<Vec<f64>>,
{
    let mut columns = Vec::with_capacity(x.len());
    let mut out_dim = None;
    for i in 0..x.len() {
        let h = step(step_base, x[i]);
        let fp = finite(f(&shifted(x, i, h))?, "jacobian_fd")?;
        let fm = finite(f(&shifted(x, i, -h))?, "jacobian_fd")?;
        if *out_dim.get_or_insert(fp.len()) != fp.len() || fm.len() != fp.len() {
            return Err(Error::NumericDiff("function output length changed".into()));
        }
        columns.push(
            fp.iter()
                .zip(&fm)
                .map(|(a, b)| (a - b) / (2.0 * h))
                .collect::<Vec<_>>(),
        );
    }
    let rows = match out_dim {
        Some(r) => r,
        None => f(x)?.len(),
    };
    let mut m = Matrix::zeros(rows, x.len());
    for (j, col) in columns.iter().enumerate() {
        for (i, v) in col.iter().enumerate() {
            m[(i, j)] = *v;
        }
    }
    Ok(m)
}

/// Gradient of a scalar function by central differences.
pub fn gradient_fd<F>(f: F, x: &[f64], step_base: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    Ok(jacobian_fd(|y| Ok(vec![f(y)?]), x, step_base)?.into_vec())
}

/// Which second partial of `g(x, y)` to differentiate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SecondPartial {
    /// `H_x g`: blocks `dim x × dim x`.
    Hx,
    /// `D_xy g`: block `i` is `D_y(∇_x g_i)`, `dim x × dim y`.
    Dxy,
    /// `D_yx g`: block `i` is `D_x(∇_y g_i)`, `dim y × dim x`.
    Dyx,
    /// `H_y g`: blocks `dim y × dim y`.
    Hy,
}

/// Second partials of a vector function `g(x, y)` by nested central
/// differences, stacked so that block `i` belongs to output `g_i`.
///
/// Mixed entries use the four-point stencil
/// `(g(++)-g(+-)-g(-+)+g(--))/(4 h_a h_b)`; pure second derivatives use
/// `(g(+)-2g(0)+g(-))/h²`. For `Hx`/`Hy` only the upper triangle is
/// evaluated and mirrored, so those blocks come out exactly symmetric.
pub fn stacked_second_fd<G>(
    g: G,
    x: &[f64],
    y: &[f64],
    which: SecondPartial,
    cfg: &DiffConfig,
) -> Result<StackedMatrix>
where
    G: Fn(&[f64], &[f64]) -> Result<Vec<f64>>,
{
    let base = cfg.second_step;
    let center = finite(g(x, y)?, "stacked_second_fd")?;
    let q = center.len();
    // Stencil over the concatenated vector w = (x, y).
    let nx = x.len();
    let w: Vec<f64> = x.iter().chain(y).copied().collect();
    let eval = |w: &[f64]| -> Result<Vec<f64>> {
        let out = finite(g(&w[..nx], &w[nx..])?, "stacked_second_fd")?;
        if out.len() != q {
            return Err(Error::NumericDiff("function output length changed".into()));
        }
        Ok(out)
    };
    let (rows, cols): (Vec<usize>, Vec<usize>) = match which {
        SecondPartial::Hx => ((0..nx).collect(), (0..nx).collect()),
        SecondPartial::Hy => ((nx..w.len()).collect(), (nx..w.len()).collect()),
        SecondPartial::Dxy => ((0..nx).collect(), (nx..w.len()).collect()),
        SecondPartial::Dyx => ((nx..w.len()).collect(), (0..nx).collect()),
    };
    let symmetric = matches!(which, SecondPartial::Hx | SecondPartial::Hy);
    let (r, c) = (rows.len(), cols.len());
    let mut out = StackedMatrix::zeros(q, r, c).into_data().into_vec();
    for (bi, &a) in rows.iter().enumerate() {
        for (bj, &b) in cols.iter().enumerate() {
            if symmetric && bj < bi {
                continue;
            }
            let ha = step(base, w[a]);
            let vals: Vec<f64> = if a == b {
                let fp = eval(&shifted(&w, a, ha))?;
                let fm = eval(&shifted(&w, a, -ha))?;
                (0..q)
                    .map(|i| (fp[i] - 2.0 * center[i] + fm[i]) / (ha * ha))
                    .collect()
            } else {
                let hb = step(base, w[b]);
                let pp = eval(&shifted(&shifted(&w, a, ha), b, hb))?;
                let pm = eval(&shifted(&shifted(&w, a, ha), b, -hb))?;
                let mp = eval(&shifted(&shifted(&w, a, -ha), b, hb))?;
                let mm = eval(&shifted(&shifted(&w, a, -ha), b, -hb))?;
                (0..q)
                    .map(|i| (pp[i] - pm[i] - mp[i] + mm[i]) / (4.0 * ha * hb))
                    .collect()
            };
            for (i, v) in vals.into_iter().enumerate() {
                out[i * r * c + bi * c + bj] = v;
                if symmetric {
                    out[i * r * c + bj * c + bi] = v;
                }
            }
        }
    }
    StackedMatrix::new(q, r, c, Matrix::new(q * r, c, out)?)
}

/// `p ↦ f_U(z*(p), p)` with `z*` produced by `lower_solver`.
fn composed_upper<'a, S>(
    problem: &'a BilevelProblem,
    lower_solver: &'a S,
) -> impl Fn(&[f64]) -> Result<f64> + 'a
where
    S: Fn(&[f64]) -> Result<Vec<f64>>,
{
    move |p: &[f64]| {
        let z = lower_solver(p)?;
        problem.upper_value(&z, p)
    }
}

/// Total gradient of `p ↦ f_U(z*(p), p)` by central differences, re-solving
/// the lower problem at every stencil point. Returned as a `1×n` row.
pub fn total_gradient_fd<S>(
    problem: &BilevelProblem,
    p: &[f64],
    lower_solver: S,
    cfg: &DiffConfig,
) -> Result<Matrix>
where
    S: Fn(&[f64]) -> Result<Vec<f64>>,
{
    let f = composed_upper(problem, &lower_solver);
    let g = gradient_fd(f, p, cfg.first_step)?;
    Ok(Matrix::row_vector(&g))
}

/// Total Hessian of `p ↦ f_U(z*(p), p)` by nested central differences of the
/// composed scalar map.
pub fn total_hessian_fd<S>(
    problem: &BilevelProblem,
    p: &[f64],
    lower_solver: S,
    cfg: &DiffConfig,
) -> Result<Matrix>
where
    S: Fn(&[f64]) -> Result<Vec<f64>>,
{
    let f = composed_upper(problem, &lower_solver);
    let h = stacked_second_fd(
        |_: &[f64], p: &[f64]| Ok(vec![f(p)?]),
        &[],
        p,
        SecondPartial::Hy,
        cfg,
    )?;
    Ok(h.block(0))
}

/// Derivative of a matrix-valued map `J(p)` (`m×n`, e.g. the implicit
/// Jacobian) by central differences, stacked as `m` blocks of `n×n` where
/// block `i` row `l` column `j` is `∂J_il/∂p_j`.
pub fn stacked_jacobian_fd<F>(jac: F, p: &[f64], cfg: &DiffConfig) -> Result<StackedMatrix>
where
    F: Fn(&[f64]) -> Result<Matrix>,
{
    let n = p.len();
    let shape = std::cell::Cell::new((0usize, 0usize));
    let flat = jacobian_fd(
        |q| {
            let j = jac(q)?;
            shape.set(j.shape());
            Ok(j.into_vec())
        },
        p,
        cfg.first_step,
    )?;
    let (m, cols) = shape.get();
    if cols != n {
        return Err(Error::dims("stacked_jacobian_fd", n, cols));
    }
    // flat row (i·n + l) holds ∇_p J_il, which is row l of block i.
    StackedMatrix::new(m, n, n, flat)
}
