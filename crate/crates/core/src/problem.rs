//! Bilevel program definition and the partial-derivative bundles.
//!
//! A problem is `min_p f_U(z*, p)` with `z*` a root of the optimality map
//! `k(z, p)`. The map is either given directly (a fixed-point formulation)
//! or derived as `k = ∇_z f_L` from a lower objective. Every partial the
//! implicit formulas need can be supplied analytically; anything missing is
//! filled by central finite differences.

use std::fmt;
use std::sync::Arc;

use crate::derivatives::{gradient_fd, jacobian_fd, stacked_second_fd, DiffConfig, SecondPartial};
use crate::error::{Error, Result};
use crate::linalg::{Matrix, StackedMatrix};

/// All evaluators take `(z, p)` in that order.
pub type ScalarFn = Arc<dyn Fn(&[f64], &[f64]) -> Result<f64> + Send + Sync>;
pub type VectorFn = Arc<dyn Fn(&[f64], &[f64]) -> Result<Vec<f64>> + Send + Sync>;
pub type MatrixFn = Arc<dyn Fn(&[f64], &[f64]) -> Result<Matrix> + Send + Sync>;
pub type StackedFn = Arc<dyn Fn(&[f64], &[f64]) -> Result<StackedMatrix> + Send + Sync>;

pub fn scalar_fn(f: impl Fn(&[f64], &[f64]) -> Result<f64> + Send + Sync + 'static) -> ScalarFn {
    Arc::new(f)
}

pub fn vector_fn(
    f: impl Fn(&[f64], &[f64]) -> Result<Vec<f64>> + Send + Sync + 'static,
) -> VectorFn {
    Arc::new(f)
}

pub fn matrix_fn(f: impl Fn(&[f64], &[f64]) -> Result<Matrix> + Send + Sync + 'static) -> MatrixFn {
    Arc::new(f)
}

pub fn stacked_fn(
    f: impl Fn(&[f64], &[f64]) -> Result<StackedMatrix> + Send + Sync + 'static,
) -> StackedFn {
    Arc::new(f)
}

/// How the lower level is specified.
#[derive(Clone)]
pub enum LowerLevel {
    /// `f_L(z, p)`; the optimality map is `∇_z f_L`.
    Objective(ScalarFn),
    /// The map `k(z, p)` itself.
    FixedPoint(VectorFn),
}

/// Optional analytic partials. Gradients are returned as plain vectors.
#[derive(Clone, Default)]
pub struct Partials {
    /// `∇_z f_L`; only consulted for objective-defined problems.
    pub k: Option<VectorFn>,
    pub dz_k: Option<MatrixFn>,
    pub dp_k: Option<MatrixFn>,
    pub dz_fu: Option<VectorFn>,
    pub dp_fu: Option<VectorFn>,
    pub hp_k: Option<StackedFn>,
    pub dpz_k: Option<StackedFn>,
    pub dzp_k: Option<StackedFn>,
    pub hz_k: Option<StackedFn>,
    pub hp_fu: Option<MatrixFn>,
    pub hz_fu: Option<MatrixFn>,
    pub dzp_fu: Option<MatrixFn>,
}

#[derive(Clone)]
pub struct BilevelProblem {
    dim_z: usize,
    dim_p: usize,
    upper: ScalarFn,
    lower: LowerLevel,
    partials: Partials,
    diff: DiffConfig,
}

impl fmt::Debug for BilevelProblem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("BilevelProblem")
            .field("dim_z", &self.dim_z)
            .field("dim_p", &self.dim_p)
            .field(
                "lower",
                &match self.lower {
                    LowerLevel::Objective(_) => "objective",
                    LowerLevel::FixedPoint(_) => "fixed_point",
                },
            )
            .finish_non_exhaustive()
    }
}

/// Where a bundle entry came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Source {
    Analytic,
    Numeric,
}

fn source<T>(o: &Option<T>) -> Source {
    if o.is_some() {
        Source::Analytic
    } else {
        Source::Numeric
    }
}

/// First-order partials of `k` and `f_U` at one point.
#[derive(Debug, Clone)]
pub struct FirstOrderBundle {
    /// `m×m`
    pub dz_k: Matrix,
    /// `m×n`
    pub dp_k: Matrix,
    /// `1×m`
    pub dz_fu: Matrix,
    /// `1×n`
    pub dp_fu: Matrix,
    pub provenance: FirstProvenance,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FirstProvenance {
    pub dz_k: Source,
    pub dp_k: Source,
    pub dz_fu: Source,
    pub dp_fu: Source,
}

/// Second-order partials of `k` and `f_U` at one point.
#[derive(Debug, Clone)]
pub struct SecondOrderBundle {
    /// `m` blocks `n×n`
    pub hp_k: StackedMatrix,
    /// `m` blocks `n×m`; block `i` is `D_z(∇_p k_i)`
    pub dpz_k: StackedMatrix,
    /// `m` blocks `m×n`; block `i` is `D_p(∇_z k_i)`
    pub dzp_k: StackedMatrix,
    /// `m` blocks `m×m`
    pub hz_k: StackedMatrix,
    /// `n×n`
    pub hp_fu: Matrix,
    /// `m×m`
    pub hz_fu: Matrix,
    /// `m×n`, `D_p(∇_z f_U)`
    pub dzp_fu: Matrix,
    pub provenance: SecondProvenance,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SecondProvenance {
    pub hp_k: Source,
    pub dpz_k: Source,
    pub dzp_k: Source,
    pub hz_k: Source,
    pub hp_fu: Source,
    pub hz_fu: Source,
    pub dzp_fu: Source,
}

/// Output of a lower-level solve.
#[derive(Debug, Clone, PartialEq)]
pub struct LowerSolution {
    pub z: Vec<f64>,
    pub residual_norm: f64,
    pub iterations: usize,
    pub converged: bool,
}

fn expect_shape(m: Matrix, rows: usize, cols: usize, what: &'static str) -> Result<Matrix> {
    if m.shape() != (rows, cols) {
        return Err(Error::dims(
            what,
            format!("{rows}x{cols}"),
            format!("{}x{}", m.rows(), m.cols()),
        ));
    }
    if !m.all_finite() {
        return Err(Error::Evaluator(format!(
            "{what} returned non-finite entries"
        )));
    }
    Ok(m)
}

fn expect_stack(
    s: StackedMatrix,
    q: usize,
    r: usize,
    c: usize,
    what: &'static str,
) -> Result<StackedMatrix> {
    if (s.blocks(), s.block_rows(), s.block_cols()) != (q, r, c) {
        return Err(Error::dims(
            what,
            format!("{q} blocks of {r}x{c}"),
            format!(
                "{} blocks of {}x{}",
                s.blocks(),
                s.block_rows(),
                s.block_cols()
            ),
        ));
    }
    Ok(s)
}

fn expect_len(v: Vec<f64>, len: usize, what: &'static str) -> Result<Vec<f64>> {
    if v.len() != len {
        return Err(Error::dims(what, len, v.len()));
    }
    Ok(v)
}

impl BilevelProblem {
    /// Lower level given by an objective `f_L(z, p)`.
    pub fn with_objective(
        dim_z: usize,
        dim_p: usize,
        upper: impl Fn(&[f64], &[f64]) -> Result<f64> + Send + Sync + 'static,
        lower: impl Fn(&[f64], &[f64]) -> Result<f64> + Send + Sync + 'static,
    ) -> Self {
        Self {
            dim_z,
            dim_p,
            upper: Arc::new(upper),
            lower: LowerLevel::Objective(Arc::new(lower)),
            partials: Partials::default(),
            diff: DiffConfig::default(),
        }
    }

    /// Lower level given by its optimality map `k(z, p)`.
    pub fn with_fixed_point(
        dim_z: usize,
        dim_p: usize,
        upper: impl Fn(&[f64], &[f64]) -> Result<f64> + Send + Sync + 'static,
        k: impl Fn(&[f64], &[f64]) -> Result<Vec<f64>> + Send + Sync + 'static,
    ) -> Self {
        Self {
            dim_z,
            dim_p,
            upper: Arc::new(upper),
            lower: LowerLevel::FixedPoint(Arc::new(k)),
            partials: Partials::default(),
            diff: DiffConfig::default(),
        }
    }

    pub fn with_partials(mut self, partials: Partials) -> Self {
        self.partials = partials;
        self
    }

    pub fn with_diff_config(mut self, diff: DiffConfig) -> Self {
        self.diff = diff;
        self
    }

    /// Same problem with every analytic derivative dropped except the
    /// optimality map itself, so all bundle fields are produced numerically.
    pub fn numeric_only(&self) -> Self {
        let mut out = self.clone();
        out.partials = Partials {
            k: self.partials.k.clone(),
            ..Partials::default()
        };
        out
    }

    pub fn dim_z(&self) -> usize {
        self.dim_z
    }

    pub fn dim_p(&self) -> usize {
        self.dim_p
    }

    pub fn lower(&self) -> &LowerLevel {
        &self.lower
    }

    pub fn partials(&self) -> &Partials {
        &self.partials
    }

    pub fn diff_config(&self) -> &DiffConfig {
        &self.diff
    }

    fn check_point(&self, z: &[f64], p: &[f64]) -> Result<()> {
        if z.len() != self.dim_z {
            return Err(Error::dims("z", self.dim_z, z.len()));
        }
        if p.len() != self.dim_p {
            return Err(Error::dims("p", self.dim_p, p.len()));
        }
        Ok(())
    }

    pub fn upper_value(&self, z: &[f64], p: &[f64]) -> Result<f64> {
        self.check_point(z, p)?;
        (self.upper)(z, p)
    }

    /// `f_L(z, p)` for objective-defined problems.
    pub fn lower_value(&self, z: &[f64], p: &[f64]) -> Option<Result<f64>> {
        match &self.lower {
            LowerLevel::Objective(f) => Some(self.check_point(z, p).and_then(|_| f(z, p))),
            LowerLevel::FixedPoint(_) => None,
        }
    }

    /// The optimality map without dimension checks.
    fn k_raw(&self, z: &[f64], p: &[f64]) -> Result<Vec<f64>> {
        match (&self.lower, &self.partials.k) {
            (LowerLevel::FixedPoint(k), _) => k(z, p),
            (LowerLevel::Objective(_), Some(k)) => k(z, p),
            (LowerLevel::Objective(f), None) => gradient_fd(|zz| f(zz, p), z, self.diff.first_step),
        }
    }

    fn has_analytic_k(&self) -> bool {
        matches!(self.lower, LowerLevel::FixedPoint(_)) || self.partials.k.is_some()
    }

    /// `k(z, p)`: the fixed-point map, or `∇_z f_L` for objective problems.
    pub fn residual(&self, z: &[f64], p: &[f64]) -> Result<Vec<f64>> {
        self.check_point(z, p)?;
        expect_len(self.k_raw(z, p)?, self.dim_z, "k(z, p)")
    }

    /// `D_z k` alone, as needed by Newton iterations on the lower problem.
    pub fn dz_k(&self, z: &[f64], p: &[f64]) -> Result<Matrix> {
        self.check_point(z, p)?;
        let m = self.dim_z;
        let out = match (&self.partials.dz_k, &self.lower) {
            (Some(f), _) => f(z, p)?,
            (None, LowerLevel::Objective(f)) if !self.has_analytic_k() => stacked_second_fd(
                |zz, pp| Ok(vec![f(zz, pp)?]),
                z,
                p,
                SecondPartial::Hx,
                &self.diff,
            )?
            .block(0),
            (None, _) => jacobian_fd(|zz| self.k_raw(zz, p), z, self.diff.first_step)?,
        };
        expect_shape(out, m, m, "D_z k")
    }

    fn dp_k(&self, z: &[f64], p: &[f64]) -> Result<Matrix> {
        let (m, n) = (self.dim_z, self.dim_p);
        let out = match (&self.partials.dp_k, &self.lower) {
            (Some(f), _) => f(z, p)?,
            (None, LowerLevel::Objective(f)) if !self.has_analytic_k() => stacked_second_fd(
                |zz, pp| Ok(vec![f(zz, pp)?]),
                z,
                p,
                SecondPartial::Dxy,
                &self.diff,
            )?
            .block(0),
            (None, _) => jacobian_fd(|pp| self.k_raw(z, pp), p, self.diff.first_step)?,
        };
        expect_shape(out, m, n, "D_p k")
    }

    pub fn first_bundle(&self, z: &[f64], p: &[f64]) -> Result<FirstOrderBundle> {
        self.check_point(z, p)?;
        let (m, n) = (self.dim_z, self.dim_p);
        let pa = &self.partials;
        let dz_fu = match &pa.dz_fu {
            Some(f) => f(z, p)?,
            None => gradient_fd(|zz| (self.upper)(zz, p), z, self.diff.first_step)?,
        };
        let dp_fu = match &pa.dp_fu {
            Some(f) => f(z, p)?,
            None => gradient_fd(|pp| (self.upper)(z, pp), p, self.diff.first_step)?,
        };
        let dz_fu = expect_shape(
            Matrix::row_vector(&expect_len(dz_fu, m, "D_z f_U")?),
            1,
            m,
            "D_z f_U",
        )?;
        let dp_fu = expect_shape(
            Matrix::row_vector(&expect_len(dp_fu, n, "D_p f_U")?),
            1,
            n,
            "D_p f_U",
        )?;
        let provenance = FirstProvenance {
            dz_k: if pa.dz_k.is_some() {
                Source::Analytic
            } else {
                Source::Numeric
            },
            dp_k: source(&pa.dp_k),
            dz_fu: source(&pa.dz_fu),
            dp_fu: source(&pa.dp_fu),
        };
        Ok(FirstOrderBundle {
            dz_k: self.dz_k(z, p)?,
            dp_k: self.dp_k(z, p)?,
            dz_fu,
            dp_fu,
            provenance,
        })
    }

    pub fn second_bundle(&self, z: &[f64], p: &[f64]) -> Result<SecondOrderBundle> {
        self.check_point(z, p)?;
        let (m, n) = (self.dim_z, self.dim_p);
        let pa = &self.partials;
        let diff = &self.diff;
        let k = |zz: &[f64], pp: &[f64]| self.k_raw(zz, pp);
        let fu = |zz: &[f64], pp: &[f64]| Ok(vec![(self.upper)(zz, pp)?]);

        let stack = |analytic: &Option<StackedFn>, which, r, c, what| -> Result<StackedMatrix> {
            let s = match analytic {
                Some(f) => f(z, p)?,
                None => stacked_second_fd(k, z, p, which, diff)?,
            };
            expect_stack(s, m, r, c, what)
        };
        let upper_block = |analytic: &Option<MatrixFn>, which, r, c, what| -> Result<Matrix> {
            let b = match analytic {
                Some(f) => f(z, p)?,
                None => stacked_second_fd(fu, z, p, which, diff)?.block(0),
            };
            expect_shape(b, r, c, what)
        };

        Ok(SecondOrderBundle {
            hp_k: stack(&pa.hp_k, SecondPartial::Hy, n, n, "H_p k")?,
            dpz_k: stack(&pa.dpz_k, SecondPartial::Dyx, n, m, "D_pz k")?,
            dzp_k: stack(&pa.dzp_k, SecondPartial::Dxy, m, n, "D_zp k")?,
            hz_k: stack(&pa.hz_k, SecondPartial::Hx, m, m, "H_z k")?,
            hp_fu: upper_block(&pa.hp_fu, SecondPartial::Hy, n, n, "H_p f_U")?,
            hz_fu: upper_block(&pa.hz_fu, SecondPartial::Hx, m, m, "H_z f_U")?,
            dzp_fu: upper_block(&pa.dzp_fu, SecondPartial::Dxy, m, n, "D_zp f_U")?,
            provenance: SecondProvenance {
                hp_k: source(&pa.hp_k),
                dpz_k: source(&pa.dpz_k),
                dzp_k: source(&pa.dzp_k),
                hz_k: source(&pa.hz_k),
                hp_fu: source(&pa.hp_fu),
                hz_fu: source(&pa.hz_fu),
                dzp_fu: source(&pa.dzp_fu),
            },
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quadratic() -> BilevelProblem {
        // f_L = ½ zᵀ diag(2,4) z − pᵀz
        BilevelProblem::with_objective(
            2,
            2,
            |z, _| Ok(z[0] * z[0] + z[1] * z[1]),
            |z, p| Ok(z[0] * z[0] + 2.0 * z[1] * z[1] - p[0] * z[0] - p[1] * z[1]),
        )
    }

    fn cos_fixed_point() -> BilevelProblem {
        BilevelProblem::with_fixed_point(
            1,
            1,
            |z, _| Ok(z[0] * z[0]),
            |z, p| Ok(vec![z[0] - p[0].cos()]),
        )
    }

    #[test]
    fn residual_vanishes_at_optimum() {
        let p = [1.0, 3.0];
        let r = quadratic().residual(&[p[0] / 2.0, p[1] / 4.0], &p).unwrap();
        assert!(r.iter().all(|v| v.abs() < 1e-9), "{r:?}");
        let r = cos_fixed_point().residual(&[1.0], &[0.0]).unwrap();
        assert_eq!(r, vec![0.0]);
    }

    #[test]
    fn dimension_mismatch() {
        assert!(matches!(
            quadratic().residual(&[1.0], &[0.0, 0.0]),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn evaluator_errors_propagate() {
        let pr = BilevelProblem::with_fixed_point(
            1,
            1,
            |_, _| Ok(0.0),
            |_, _| Err(Error::Evaluator("boom".into())),
        );
        assert_eq!(
            pr.residual(&[0.0], &[0.0]),
            Err(Error::Evaluator("boom".into()))
        );
    }

    #[test]
    fn numeric_bundle_of_cos_fixed_point() {
        let p = 0.7_f64;
        let pr = cos_fixed_point();
        let fb = pr.first_bundle(&[p.cos()], &[p]).unwrap();
        assert!((fb.dz_k[(0, 0)] - 1.0).abs() < 1e-9);
        assert!((fb.dp_k[(0, 0)] - p.sin()).abs() < 1e-8);
        assert_eq!(fb.provenance.dp_k, Source::Numeric);
        let sb = pr.second_bundle(&[p.cos()], &[p]).unwrap();
        assert!((sb.hp_k.block(0)[(0, 0)] - p.cos()).abs() < 1e-5);
        assert!(sb.dpz_k.data().max_abs() < 1e-6);
        assert!(sb.dzp_k.data().max_abs() < 1e-6);
        assert!(sb.hz_k.data().max_abs() < 1e-6);
        assert!((sb.hz_fu[(0, 0)] - 2.0).abs() < 1e-5);
    }

    #[test]
    fn quadratic_objective_bundle() {
        let pr = quadratic();
        let fb = pr.first_bundle(&[0.3, -0.2], &[1.0, 1.0]).unwrap();
        let a = Matrix::from_diag(&[2.0, 4.0]);
        assert!(fb.dz_k.sub(&a).unwrap().max_abs() < 1e-6);
        assert!(
            fb.dp_k
                .sub(&Matrix::identity(2).scale(-1.0))
                .unwrap()
                .max_abs()
                < 1e-6
        );
        assert!(fb.dz_k.max_asymmetry() < 1e-6);
    }

    #[test]
    fn analytic_partials_take_precedence() {
        let pr = cos_fixed_point().with_partials(Partials {
            dp_k: Some(matrix_fn(|_, p| Matrix::new(1, 1, vec![p[0].sin()]))),
            ..Default::default()
        });
        let fb = pr.first_bundle(&[1.0], &[0.5]).unwrap();
        assert_eq!(fb.provenance.dp_k, Source::Analytic);
        assert_eq!(fb.dp_k[(0, 0)], 0.5_f64.sin());
    }

    #[test]
    fn analytic_shape_is_checked() {
        let pr = cos_fixed_point().with_partials(Partials {
            dz_k: Some(matrix_fn(|_, _| Ok(Matrix::zeros(2, 2)))),
            ..Default::default()
        });
        assert!(matches!(
            pr.first_bundle(&[1.0], &[0.5]),
            Err(Error::DimensionMismatch { .. })
        ));
    }
}
