//! Built-in bilevel instances with analytic partials and, where available,
//! closed-form oracles.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::linalg::{factorize, Matrix, StackedMatrix};
use crate::problem::{
    matrix_fn, stacked_fn, vector_fn, BilevelProblem, FirstOrderBundle, FirstProvenance, Partials,
    SecondOrderBundle, SecondProvenance, Source,
};
use crate::solvers::{solve_box_qp, BoxBarrier};

const LN10: f64 = std::f64::consts::LN_10;

/// Reference optimum of an instance's upper problem.
#[derive(Debug, Clone, PartialEq)]
pub struct KnownOptimum {
    pub p: Option<Vec<f64>>,
    pub value: f64,
    pub note: &'static str,
}

/// `f_L = ½zᵀAz − pᵀz`, `f_U = ‖z − z_t‖²`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticForm {
    pub a: Matrix,
    pub z_target: Vec<f64>,
}

impl QuadraticForm {
    pub fn z_star(&self, p: &[f64]) -> Result<Vec<f64>> {
        factorize(&self.a)?.solve_vec(p)
    }

    /// `D_p z* = A⁻¹`
    pub fn dp_z(&self) -> Result<Matrix> {
        factorize(&self.a)?.solve(&Matrix::identity(self.a.rows()))
    }

    /// `2A⁻ᵀA⁻¹`
    pub fn total_hessian(&self) -> Result<Matrix> {
        let inv = self.dp_z()?;
        Ok(inv.transpose().matmul(&inv)?.scale(2.0))
    }
}

/// Train/test split of a planted linear model.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressionData {
    pub x_train: Matrix,
    pub y_train: Vec<f64>,
    pub x_test: Matrix,
    pub y_test: Vec<f64>,
    pub w_true: Vec<f64>,
}

impl RegressionData {
    /// Solves `(XᵀX + diag(λ))z = XᵀY` on the training split.
    pub fn ridge_solution(&self, lambdas: &[f64]) -> Result<Vec<f64>> {
        let g = self.x_train.transpose().matmul(&self.x_train)?;
        let mut a = g;
        for (i, l) in lambdas.iter().enumerate() {
            a[(i, i)] += l;
        }
        let b = self.x_train.tr_matvec(&self.y_train)?;
        factorize(&a)?.solve_vec(&b)
    }

    pub fn test_loss(&self, z: &[f64]) -> Result<f64> {
        let r = self.x_test.matvec(z)?;
        Ok(r.iter()
            .zip(&self.y_test)
            .map(|(a, b)| (a - b) * (a - b))
            .sum())
    }

    /// Test loss of the ridge solution with weights `10^{p_i}`; a scalar
    /// `p` applies to every feature.
    pub fn loss_at(&self, p: &[f64]) -> Result<f64> {
        let m = self.w_true.len();
        let lambdas: Vec<f64> = match p {
            [v] => vec![weight(*v); m],
            _ if p.len() == m => p.iter().map(|&v| weight(v)).collect(),
            _ => return Err(Error::dims("loss_at", m, p.len())),
        };
        self.test_loss(&self.ridge_solution(&lambdas)?)
    }

    /// Minimizes the scalar-weight test loss over `[lo, hi]`: grid scan with
    /// `points` nodes, then golden-section refinement around the best node.
    pub fn scan_ridge_optimum(&self, lo: f64, hi: f64, points: usize) -> Result<(f64, f64)> {
        if points < 3 || !(hi > lo) {
            return Err(Error::InvalidArgument(format!(
                "bad scan [{lo}, {hi}] with {points} points"
            )));
        }
        let h = (hi - lo) / (points - 1) as f64;
        let mut best = (lo, f64::INFINITY);
        for i in 0..points {
            let p = lo + h * i as f64;
            let f = self.loss_at(&[p])?;
            if f < best.1 {
                best = (p, f);
            }
        }
        let (a, b) = ((best.0 - h).max(lo), (best.0 + h).min(hi));
        let (p, f) = golden_section(|p| self.loss_at(&[p]), a, b, 1e-10)?;
        Ok(if f < best.1 { (p, f) } else { best })
    }

    /// Coordinate-wise golden-section search of the per-feature test loss
    /// over `[lo, hi]^m`, starting from `p`.
    pub fn diag_reference_optimum(
        &self,
        p: &[f64],
        lo: f64,
        hi: f64,
        sweeps: usize,
    ) -> Result<(Vec<f64>, f64)> {
        let mut p = p.to_vec();
        let mut f = self.loss_at(&p)?;
        for _ in 0..sweeps {
            let before = f;
            for i in 0..p.len() {
                let mut q = p.clone();
                let (pi, fi) = golden_section(
                    |v| {
                        q[i] = v;
                        self.loss_at(&q)
                    },
                    lo,
                    hi,
                    1e-9,
                )?;
                if fi < f {
                    p[i] = pi;
                    f = fi;
                }
            }
            if before - f <= 1e-15 * before.abs().max(1.0) {
                break;
            }
        }
        Ok((p, f))
    }
}

fn golden_section<F: FnMut(f64) -> Result<f64>>(
    mut f: F,
    mut a: f64,
    mut b: f64,
    tol: f64,
) -> Result<(f64, f64)> {
    let r = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - r * (b - a);
    let mut d = a + r * (b - a);
    let (mut fc, mut fd) = (f(c)?, f(d)?);
    while b - a > tol {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - r * (b - a);
            fc = f(c)?;
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + r * (b - a);
            fd = f(d)?;
        }
    }
    Ok(if fc < fd { (c, fc) } else { (d, fd) })
}

/// Condensed finite-horizon LQR tracking problem.
#[derive(Debug, Clone, PartialEq)]
pub struct LqrData {
    pub state_dim: usize,
    pub control_dim: usize,
    pub horizon: usize,
    pub a: Matrix,
    pub b: Matrix,
    /// stacked states `X = φ + ΓU`
    pub gamma: Matrix,
    pub phi: Vec<f64>,
    pub q: f64,
    pub r: f64,
    pub x_expert: Vec<f64>,
    pub u_expert: Vec<f64>,
    /// reference that generated the expert
    pub p_hidden: Vec<f64>,
    pub u_lim: Option<f64>,
    pub barrier: Option<BoxBarrier>,
}

impl LqrData {
    pub fn dim_z(&self) -> usize {
        self.horizon * self.control_dim
    }

    pub fn dim_p(&self) -> usize {
        self.horizon * (self.state_dim + self.control_dim)
    }

    fn split<'a>(&self, p: &'a [f64]) -> (&'a [f64], &'a [f64]) {
        p.split_at(self.horizon * self.state_dim)
    }

    pub fn states(&self, u: &[f64]) -> Vec<f64> {
        let mut x = self.gamma.matvec(u).expect("shape fixed at construction");
        x.iter_mut().zip(&self.phi).for_each(|(a, b)| *a += b);
        x
    }

    /// Hessian `2(qΓᵀΓ + rI)` and linear term of the quadratic lower
    /// objective without barrier.
    pub fn lower_quadratic(&self, p: &[f64]) -> Result<(Matrix, Vec<f64>)> {
        let (xr, ur) = self.split(p);
        let gtg = self.gamma.transpose().matmul(&self.gamma)?;
        let h = gtg.scale(2.0 * self.q).add_diagonal(2.0 * self.r)?;
        let diff: Vec<f64> = self.phi.iter().zip(xr).map(|(a, b)| a - b).collect();
        let gt = self.gamma.tr_matvec(&diff)?;
        let g = gt
            .iter()
            .zip(ur)
            .map(|(a, u)| 2.0 * self.q * a - 2.0 * self.r * u)
            .collect();
        Ok((h, g))
    }

    /// Unconstrained lower solution.
    pub fn unconstrained_solution(&self, p: &[f64]) -> Result<Vec<f64>> {
        let (h, g) = self.lower_quadratic(p)?;
        let rhs: Vec<f64> = g.iter().map(|v| -v).collect();
        factorize(&h)?.solve_vec(&rhs)
    }

    /// Exactly box-constrained lower solution, `|u_i| ≤ u_lim`.
    pub fn clamped_solution(&self, p: &[f64]) -> Result<Vec<f64>> {
        let lim = self
            .u_lim
            .ok_or_else(|| Error::InvalidArgument("instance has no control limit".into()))?;
        let (h, g) = self.lower_quadratic(p)?;
        solve_box_qp(&h, &g, lim)
    }

    /// Upper loss of the exactly box-constrained lower solution at `p`.
    pub fn clamped_loss(&self, p: &[f64]) -> Result<f64> {
        Ok(self.upper_loss(&self.clamped_solution(p)?))
    }

    pub fn upper_loss(&self, u: &[f64]) -> f64 {
        let x = self.states(u);
        let sx: f64 = x
            .iter()
            .zip(&self.x_expert)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        let su: f64 = u
            .iter()
            .zip(&self.u_expert)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        sx + su
    }
}

/// A named problem with a starting point and optional oracles.
#[derive(Debug, Clone)]
pub struct ProblemInstance {
    pub name: String,
    pub problem: BilevelProblem,
    pub p0: Vec<f64>,
    /// starting point for the first lower solve
    pub z0: Vec<f64>,
    pub known_optimum: Option<KnownOptimum>,
    pub seed: u64,
    pub quadratic: Option<QuadraticForm>,
    pub regression: Option<RegressionData>,
    pub lqr: Option<LqrData>,
}

impl ProblemInstance {
    fn new(name: &str, problem: BilevelProblem, p0: Vec<f64>, z0: Vec<f64>, seed: u64) -> Self {
        Self {
            name: name.into(),
            problem,
            p0,
            z0,
            known_optimum: None,
            seed,
            quadratic: None,
            regression: None,
            lqr: None,
        }
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn random_orthogonal(n: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(n);
    while cols.len() < n {
        let mut v: Vec<f64> = (0..n).map(|_| normal(rng)).collect();
        for _ in 0..2 {
            for c in &cols {
                let d = crate::linalg::dot(&v, c);
                crate::linalg::axpy(-d, c, &mut v);
            }
        }
        let nv = crate::linalg::norm(&v);
        if nv > 1e-8 {
            v.iter_mut().for_each(|x| *x /= nv);
            cols.push(v);
        }
    }
    Matrix::from_raw(
        n,
        n,
        (0..n)
            .flat_map(|i| cols.iter().map(move |c| c[i]))
            .collect(),
    )
}

/// Random SPD `A` with eigenvalues in `[1, 10]`; see [`make_quadratic`].
pub fn make_quadratic_toy(m: usize, n: usize, seed: u64) -> Result<ProblemInstance> {
    if m != n || m == 0 {
        return Err(Error::InvalidArgument(format!(
            "quadratic toy needs m == n > 0, got {m}, {n}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let q = random_orthogonal(m, &mut rng);
    let eig: Vec<f64> = (0..m).map(|_| rng.random_range(1.0..=10.0)).collect();
    let a = q
        .matmul(&Matrix::from_diag(&eig))?
        .matmul(&q.transpose())?
        .symmetrize()?;
    let z_target: Vec<f64> = (0..m).map(|_| normal(&mut rng)).collect();
    let p0: Vec<f64> = (0..m).map(|_| normal(&mut rng)).collect();
    let mut inst = make_quadratic(a, z_target, p0)?;
    inst.seed = seed;
    inst.name = "quadratic".into();
    Ok(inst)
}

/// `f_L = ½zᵀAz − pᵀz` with SPD `A`, `f_U = ‖z − z_t‖²`. The upper optimum
/// is `p = A·z_t` with value 0.
pub fn make_quadratic(a: Matrix, z_target: Vec<f64>, p0: Vec<f64>) -> Result<ProblemInstance> {
    let m = a.rows();
    if !a.is_square() || z_target.len() != m || p0.len() != m {
        return Err(Error::dims(
            "make_quadratic",
            m,
            format!("{:?}, {}, {}", a.shape(), z_target.len(), p0.len()),
        ));
    }
    let (a1, a2, a3) = (a.clone(), a.clone(), a.clone());
    let (t1, t2) = (z_target.clone(), z_target.clone());
    let problem = BilevelProblem::with_objective(
        m,
        m,
        move |z, _| Ok(z.iter().zip(&t1).map(|(a, b)| (a - b) * (a - b)).sum()),
        move |z, p| {
            let az = a1.matvec(z)?;
            Ok(0.5 * crate::linalg::dot(z, &az) - crate::linalg::dot(p, z))
        },
    )
    .with_partials(Partials {
        k: Some(vector_fn(move |z, p| {
            Ok(a2.matvec(z)?.iter().zip(p).map(|(a, b)| a - b).collect())
        })),
        dz_k: Some(matrix_fn(move |_, _| Ok(a3.clone()))),
        dp_k: Some(matrix_fn(move |_, _| Ok(Matrix::identity(m).scale(-1.0)))),
        dz_fu: Some(vector_fn(move |z, _| {
            Ok(z.iter().zip(&t2).map(|(a, b)| 2.0 * (a - b)).collect())
        })),
        dp_fu: Some(vector_fn(move |_, _| Ok(vec![0.0; m]))),
        hp_k: Some(stacked_fn(move |_, _| Ok(StackedMatrix::zeros(m, m, m)))),
        dpz_k: Some(stacked_fn(move |_, _| Ok(StackedMatrix::zeros(m, m, m)))),
        dzp_k: Some(stacked_fn(move |_, _| Ok(StackedMatrix::zeros(m, m, m)))),
        hz_k: Some(stacked_fn(move |_, _| Ok(StackedMatrix::zeros(m, m, m)))),
        hp_fu: Some(matrix_fn(move |_, _| Ok(Matrix::zeros(m, m)))),
        hz_fu: Some(matrix_fn(move |_, _| Ok(Matrix::identity(m).scale(2.0)))),
        dzp_fu: Some(matrix_fn(move |_, _| Ok(Matrix::zeros(m, m)))),
    });
    let p_opt = a.matvec(&z_target)?;
    let mut inst = ProblemInstance::new("quadratic", problem, p0, vec![0.0; m], 0);
    inst.known_optimum = Some(KnownOptimum {
        p: Some(p_opt),
        value: 0.0,
        note: "closed form p = A z_t",
    });
    inst.quadratic = Some(QuadraticForm { a, z_target });
    Ok(inst)
}

/// `k = z − cos p`, `f_U = z²`; total objective `cos²p`.
pub fn make_scalar_cos() -> ProblemInstance {
    let problem = BilevelProblem::with_fixed_point(
        1,
        1,
        |z, _| Ok(z[0] * z[0]),
        |z, p| Ok(vec![z[0] - p[0].cos()]),
    )
    .with_partials(scalar_cos_partials());
    let mut inst = ProblemInstance::new("scalar_cos", problem, vec![0.4], vec![0.0], 0);
    inst.known_optimum = Some(KnownOptimum {
        p: Some(vec![std::f64::consts::FRAC_PI_2]),
        value: 0.0,
        note: "closed form cos p = 0",
    });
    inst
}

fn scalar(v: f64) -> Matrix {
    Matrix::from_raw(1, 1, vec![v])
}

fn scalar_stack(v: f64) -> StackedMatrix {
    StackedMatrix::new(1, 1, 1, scalar(v)).expect("1x1")
}

fn scalar_cos_partials() -> Partials {
    Partials {
        k: None,
        dz_k: Some(matrix_fn(|_, _| Ok(scalar(1.0)))),
        dp_k: Some(matrix_fn(|_, p| Ok(scalar(p[0].sin())))),
        dz_fu: Some(vector_fn(|z, _| Ok(vec![2.0 * z[0]]))),
        dp_fu: Some(vector_fn(|_, _| Ok(vec![0.0]))),
        hp_k: Some(stacked_fn(|_, p| Ok(scalar_stack(p[0].cos())))),
        dpz_k: Some(stacked_fn(|_, _| Ok(scalar_stack(0.0)))),
        dzp_k: Some(stacked_fn(|_, _| Ok(scalar_stack(0.0)))),
        hz_k: Some(stacked_fn(|_, _| Ok(scalar_stack(0.0)))),
        hp_fu: Some(matrix_fn(|_, _| Ok(scalar(0.0)))),
        hz_fu: Some(matrix_fn(|_, _| Ok(scalar(2.0)))),
        dzp_fu: Some(matrix_fn(|_, _| Ok(scalar(0.0)))),
    }
}

/// `k = z − cos p` with the directly coupled `f_U = (z − p)²`, whose total
/// Hessian needs the mixed upper partial.
pub fn make_coupled_scalar() -> ProblemInstance {
    let mut partials = scalar_cos_partials();
    partials.dz_fu = Some(vector_fn(|z, p| Ok(vec![2.0 * (z[0] - p[0])])));
    partials.dp_fu = Some(vector_fn(|z, p| Ok(vec![-2.0 * (z[0] - p[0])])));
    partials.hp_fu = Some(matrix_fn(|_, _| Ok(scalar(2.0))));
    partials.dzp_fu = Some(matrix_fn(|_, _| Ok(scalar(-2.0))));
    let problem = BilevelProblem::with_fixed_point(
        1,
        1,
        |z, p| Ok((z[0] - p[0]) * (z[0] - p[0])),
        |z, p| Ok(vec![z[0] - p[0].cos()]),
    )
    .with_partials(partials);
    ProblemInstance::new("coupled_scalar", problem, vec![0.2], vec![0.0], 0)
}

/// Planted-weight standard deviation of the synthetic regression data.
pub const PLANTED_WEIGHT_SCALE: f64 = 0.1;
pub const REGRESSION_NOISE: f64 = 0.1;

/// Standard-normal features, planted weights, noisy targets, 50/50 split.
pub fn regression_data(features: usize, samples: usize, seed: u64) -> Result<RegressionData> {
    if features == 0 || samples < 2 {
        return Err(Error::InvalidArgument(format!(
            "need features ≥ 1 and samples ≥ 2, got {features}, {samples}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w_true: Vec<f64> = (0..features)
        .map(|_| PLANTED_WEIGHT_SCALE * normal(&mut rng))
        .collect();
    let x: Vec<f64> = (0..samples * features).map(|_| normal(&mut rng)).collect();
    let y: Vec<f64> = (0..samples)
        .map(|i| {
            let row = &x[i * features..(i + 1) * features];
            crate::linalg::dot(row, &w_true) + REGRESSION_NOISE * normal(&mut rng)
        })
        .collect();
    let train = samples / 2;
    Ok(RegressionData {
        x_train: Matrix::from_raw(train, features, x[..train * features].to_vec()),
        y_train: y[..train].to_vec(),
        x_test: Matrix::from_raw(samples - train, features, x[train * features..].to_vec()),
        y_test: y[train..].to_vec(),
        w_true,
    })
}

struct RidgeParts {
    g: Matrix,
    b: Vec<f64>,
    x_train: Matrix,
    y_train: Vec<f64>,
    x_test: Matrix,
    y_test: Vec<f64>,
    h_test: Matrix,
}

impl RidgeParts {
    fn new(d: &RegressionData) -> Result<Self> {
        Ok(Self {
            g: d.x_train.transpose().matmul(&d.x_train)?,
            b: d.x_train.tr_matvec(&d.y_train)?,
            x_train: d.x_train.clone(),
            y_train: d.y_train.clone(),
            x_test: d.x_test.clone(),
            y_test: d.y_test.clone(),
            h_test: d.x_test.transpose().matmul(&d.x_test)?.scale(2.0),
        })
    }

    fn train_loss(&self, z: &[f64]) -> Result<f64> {
        let r = self.x_train.matvec(z)?;
        Ok(r.iter()
            .zip(&self.y_train)
            .map(|(a, b)| (a - b) * (a - b))
            .sum())
    }

    fn test_loss(&self, z: &[f64]) -> Result<f64> {
        let r = self.x_test.matvec(z)?;
        Ok(r.iter()
            .zip(&self.y_test)
            .map(|(a, b)| (a - b) * (a - b))
            .sum())
    }

    fn test_grad(&self, z: &[f64]) -> Result<Vec<f64>> {
        let mut r = self.x_test.matvec(z)?;
        r.iter_mut()
            .zip(&self.y_test)
            .for_each(|(a, b)| *a = 2.0 * (*a - b));
        self.x_test.tr_matvec(&r)
    }

    /// `2(Gz − b) + 2·diag(s)z`
    fn k(&self, z: &[f64], s: &[f64]) -> Result<Vec<f64>> {
        let gz = self.g.matvec(z)?;
        Ok((0..z.len())
            .map(|i| 2.0 * (gz[i] - self.b[i]) + 2.0 * s[i] * z[i])
            .collect())
    }

    fn dz_k(&self, s: &[f64]) -> Result<Matrix> {
        let mut a = self.g.scale(2.0);
        for (i, si) in s.iter().enumerate() {
            a[(i, i)] += 2.0 * si;
        }
        check_finite(a, "D_z k")
    }
}

fn check_finite(m: Matrix, what: &str) -> Result<Matrix> {
    if m.all_finite() {
        Ok(m)
    } else {
        Err(Error::NonFinite(what.into()))
    }
}

fn weight(p: f64) -> f64 {
    10f64.powf(p)
}

/// Ridge regression with a scalar log₁₀ Tikhonov weight:
/// `f_L = ‖X_tr z − Y_tr‖² + 10^p‖z‖²`, `f_U = ‖X_te z − Y_te‖²`.
pub fn make_ridge(features: usize, samples: usize, seed: u64) -> Result<ProblemInstance> {
    let data = regression_data(features, samples, seed)?;
    let m = features;
    let parts = std::sync::Arc::new(RidgeParts::new(&data)?);
    let all = move |p: &[f64]| vec![weight(p[0]); m];
    let (pu, pl, pk, pj, pd, pg) = (
        parts.clone(),
        parts.clone(),
        parts.clone(),
        parts.clone(),
        parts.clone(),
        parts,
    );
    let problem = BilevelProblem::with_objective(
        m,
        1,
        move |z, _| pu.test_loss(z),
        move |z, p| Ok(pl.train_loss(z)? + weight(p[0]) * crate::linalg::dot(z, z)),
    )
    .with_partials(Partials {
        k: Some(vector_fn(move |z, p| pk.k(z, &all(p)))),
        dz_k: Some(matrix_fn(move |_, p| {
            pj.dz_k(&vec![weight(p[0]); pj.b.len()])
        })),
        dp_k: Some(matrix_fn(move |z, p| {
            let s = weight(p[0]);
            check_finite(
                Matrix::from_raw(m, 1, z.iter().map(|zi| 2.0 * LN10 * s * zi).collect()),
                "D_p k",
            )
        })),
        dz_fu: Some(vector_fn(move |z, _| pd.test_grad(z))),
        dp_fu: Some(vector_fn(|_, _| Ok(vec![0.0]))),
        hp_k: Some(stacked_fn(move |z, p| {
            let s = weight(p[0]);
            let data = z.iter().map(|zi| 2.0 * LN10 * LN10 * s * zi).collect();
            StackedMatrix::new(
                m,
                1,
                1,
                check_finite(Matrix::from_raw(m, 1, data), "H_p k")?,
            )
        })),
        dpz_k: Some(stacked_fn(move |_, p| {
            let c = 2.0 * LN10 * weight(p[0]);
            let data = Matrix::identity(m).scale(c);
            StackedMatrix::new(m, 1, m, check_finite(data, "D_pz k")?)
        })),
        dzp_k: Some(stacked_fn(move |_, p| {
            let c = 2.0 * LN10 * weight(p[0]);
            let mut data = vec![0.0; m * m];
            for i in 0..m {
                data[i * m + i] = c;
            }
            StackedMatrix::new(
                m,
                m,
                1,
                check_finite(Matrix::from_raw(m * m, 1, data), "D_zp k")?,
            )
        })),
        hz_k: Some(stacked_fn(move |_, _| Ok(StackedMatrix::zeros(m, m, m)))),
        hp_fu: Some(matrix_fn(|_, _| Ok(Matrix::zeros(1, 1)))),
        hz_fu: Some(matrix_fn(move |_, _| Ok(pg.h_test.clone()))),
        dzp_fu: Some(matrix_fn(move |_, _| Ok(Matrix::zeros(m, 1)))),
    });
    let mut inst = ProblemInstance::new("ridge", problem, vec![1.0], vec![0.0; m], seed);
    inst.regression = Some(data);
    Ok(inst)
}

/// Ridge regression with one log₁₀ weight per feature:
/// `f_L = ‖X_tr z − Y_tr‖² + Σ 10^{p_i} z_i²`. Uses the same data as
/// [`make_ridge`] for equal arguments.
pub fn make_diag_ridge(features: usize, samples: usize, seed: u64) -> Result<ProblemInstance> {
    let data = regression_data(features, samples, seed)?;
    let m = features;
    let parts = std::sync::Arc::new(RidgeParts::new(&data)?);
    let weights = |p: &[f64]| p.iter().map(|&v| weight(v)).collect::<Vec<f64>>();
    let (pu, pl, pk, pj, pd, pg) = (
        parts.clone(),
        parts.clone(),
        parts.clone(),
        parts.clone(),
        parts.clone(),
        parts,
    );
    let diag_blocks = move |vals: Vec<f64>, what: &'static str| -> Result<StackedMatrix> {
        let mut data = vec![0.0; m * m * m];
        for (i, v) in vals.into_iter().enumerate() {
            data[i * m * m + i * m + i] = v;
        }
        StackedMatrix::new(
            m,
            m,
            m,
            check_finite(Matrix::from_raw(m * m, m, data), what)?,
        )
    };
    let problem = BilevelProblem::with_objective(
        m,
        m,
        move |z, _| pu.test_loss(z),
        move |z, p| {
            Ok(pl.train_loss(z)?
                + z.iter()
                    .zip(p)
                    .map(|(zi, pi)| weight(*pi) * zi * zi)
                    .sum::<f64>())
        },
    )
    .with_partials(Partials {
        k: Some(vector_fn(move |z, p| pk.k(z, &weights(p)))),
        dz_k: Some(matrix_fn(move |_, p| pj.dz_k(&weights(p)))),
        dp_k: Some(matrix_fn(move |z, p| {
            let d: Vec<f64> = z
                .iter()
                .zip(p)
                .map(|(zi, pi)| 2.0 * LN10 * weight(*pi) * zi)
                .collect();
            check_finite(Matrix::from_diag(&d), "D_p k")
        })),
        dz_fu: Some(vector_fn(move |z, _| pd.test_grad(z))),
        dp_fu: Some(vector_fn(move |_, _| Ok(vec![0.0; m]))),
        hp_k: Some(stacked_fn(move |z, p| {
            diag_blocks(
                z.iter()
                    .zip(p)
                    .map(|(zi, pi)| 2.0 * LN10 * LN10 * weight(*pi) * zi)
                    .collect(),
                "H_p k",
            )
        })),
        dpz_k: Some(stacked_fn(move |_, p| {
            diag_blocks(
                p.iter().map(|pi| 2.0 * LN10 * weight(*pi)).collect(),
                "D_pz k",
            )
        })),
        dzp_k: Some(stacked_fn(move |_, p| {
            diag_blocks(
                p.iter().map(|pi| 2.0 * LN10 * weight(*pi)).collect(),
                "D_zp k",
            )
        })),
        hz_k: Some(stacked_fn(move |_, _| Ok(StackedMatrix::zeros(m, m, m)))),
        hp_fu: Some(matrix_fn(move |_, _| Ok(Matrix::zeros(m, m)))),
        hz_fu: Some(matrix_fn(move |_, _| Ok(pg.h_test.clone()))),
        dzp_fu: Some(matrix_fn(move |_, _| Ok(Matrix::zeros(m, m)))),
    });
    let mut inst = ProblemInstance::new("diag_ridge", problem, vec![1.0; m], vec![0.0; m], seed);
    inst.regression = Some(data);
    Ok(inst)
}

/// Ridge lower level (scalar or per-feature weights) with the logistic
/// cross-entropy of the test split as upper loss, labels `y > 0`. Only `k`
/// is analytic; every other partial is numeric.
pub fn make_ridge_cross_entropy(
    features: usize,
    samples: usize,
    seed: u64,
    per_feature: bool,
) -> Result<ProblemInstance> {
    let data = regression_data(features, samples, seed)?;
    let m = features;
    let n = if per_feature { m } else { 1 };
    let parts = std::sync::Arc::new(RidgeParts::new(&data)?);
    let labels: Vec<f64> = data
        .y_test
        .iter()
        .map(|&y| if y > 0.0 { 1.0 } else { 0.0 })
        .collect();
    let weights = move |p: &[f64]| -> Vec<f64> {
        if per_feature {
            p.iter().map(|&v| weight(v)).collect()
        } else {
            vec![weight(p[0]); m]
        }
    };
    let (pu, pl, pk) = (parts.clone(), parts.clone(), parts);
    let problem = BilevelProblem::with_objective(
        m,
        n,
        move |z, _| {
            let s = pu.x_test.matvec(z)?;
            Ok(s.iter()
                .zip(&labels)
                .map(|(&si, &t)| softplus(si) - t * si)
                .sum())
        },
        move |z, p| {
            let w = weights(p);
            Ok(pl.train_loss(z)? + z.iter().zip(&w).map(|(zi, wi)| wi * zi * zi).sum::<f64>())
        },
    )
    .with_partials(Partials {
        k: Some(vector_fn(move |z, p| pk.k(z, &weights(p)))),
        ..Partials::default()
    });
    let name = if per_feature {
        "diag_ridge_cross_entropy"
    } else {
        "ridge_cross_entropy"
    };
    let mut inst = ProblemInstance::new(name, problem, vec![1.0; n], vec![0.0; m], seed);
    inst.regression = Some(data);
    Ok(inst)
}

/// `ln(1 + eˢ)` without overflow.
fn softplus(s: f64) -> f64 {
    s.max(0.0) + (-s.abs()).exp().ln_1p()
}

pub const LQR_DT: f64 = 0.1;
pub const LQR_Q: f64 = 1.0;
pub const LQR_R: f64 = 0.1;
const MAX_REFERENCE_HALVINGS: usize = 30;

fn dynamics(state_dim: usize, control_dim: usize, rng: &mut ChaCha8Rng) -> (Matrix, Matrix) {
    if (state_dim, control_dim) == (2, 1) {
        let a = Matrix::from_raw(2, 2, vec![1.0, LQR_DT, 0.0, 1.0]);
        let b = Matrix::from_raw(2, 1, vec![LQR_DT * LQR_DT / 2.0, LQR_DT]);
        return (a, b);
    }
    let mut a = Matrix::identity(state_dim);
    for i in 0..state_dim {
        for j in 0..state_dim {
            a[(i, j)] += 0.5 * LQR_DT * normal(rng);
        }
    }
    let b = Matrix::from_raw(
        state_dim,
        control_dim,
        (0..state_dim * control_dim)
            .map(|_| LQR_DT * normal(rng))
            .collect(),
    );
    (a, b)
}

/// `X = φ + ΓU` for `x_{t+1} = A x_t + B u_t`, `X = (x_1, …, x_N)`.
fn condense(a: &Matrix, b: &Matrix, x0: &[f64], horizon: usize) -> Result<(Matrix, Vec<f64>)> {
    let (s, c) = (a.rows(), b.cols());
    let mut powers = vec![Matrix::identity(s)];
    for t in 1..=horizon {
        powers.push(powers[t - 1].matmul(a)?);
    }
    let mut gamma = Matrix::zeros(horizon * s, horizon * c);
    let mut phi = Vec::with_capacity(horizon * s);
    for t in 0..horizon {
        phi.extend(powers[t + 1].matvec(x0)?);
        for j in 0..=t {
            let blk = powers[t - j].matmul(b)?;
            for r in 0..s {
                for q in 0..c {
                    gamma[(t * s + r, j * c + q)] = blk[(r, q)];
                }
            }
        }
    }
    Ok((gamma, phi))
}

/// Inverse LQR: recover the tracking reference `p = (X_ref, U_ref)` from an
/// expert trajectory. With `u_lim`, the box `|u| ≤ u_lim` enters the lower
/// objective through a log barrier of refinement `barrier_alpha`.
pub fn make_inverse_lqr(
    state_dim: usize,
    control_dim: usize,
    horizon: usize,
    u_lim: Option<f64>,
    barrier_alpha: Option<f64>,
    seed: u64,
) -> Result<ProblemInstance> {
    if state_dim == 0 || control_dim == 0 || horizon == 0 {
        return Err(Error::InvalidArgument(
            "LQR dimensions must be positive".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (a, b) = dynamics(state_dim, control_dim, &mut rng);
    let x0 = vec![0.0; state_dim];
    let (gamma, phi) = condense(&a, &b, &x0, horizon)?;

    let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let mut p_hidden: Vec<f64> = Vec::with_capacity(horizon * (state_dim + control_dim));
    for t in 0..horizon {
        for i in 0..state_dim {
            let wave =
                (phase + 2.0 * std::f64::consts::PI * (t + 1) as f64 / horizon as f64 + i as f64)
                    .sin();
            p_hidden.push(wave + 0.1 * normal(&mut rng));
        }
    }
    for _ in 0..horizon * control_dim {
        p_hidden.push(0.1 * normal(&mut rng));
    }

    let barrier = match u_lim {
        Some(lim) => Some(BoxBarrier::new(
            lim,
            barrier_alpha.unwrap_or(10f64.powf(2.5)),
        )?),
        None => None,
    };
    let mut data = LqrData {
        state_dim,
        control_dim,
        horizon,
        a,
        b,
        gamma,
        phi,
        q: LQR_Q,
        r: LQR_R,
        x_expert: Vec::new(),
        u_expert: Vec::new(),
        p_hidden,
        u_lim,
        barrier,
    };
    let mut halvings = 0;
    loop {
        let u = data.unconstrained_solution(&data.p_hidden)?;
        let max_u = u.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        match u_lim {
            Some(lim) if max_u >= lim => {
                if halvings == MAX_REFERENCE_HALVINGS {
                    return Err(Error::InfeasibleExpert {
                        u_lim: lim,
                        max_control: max_u,
                    });
                }
                data.p_hidden.iter_mut().for_each(|v| *v *= 0.5);
                halvings += 1;
            }
            _ => {
                data.x_expert = data.states(&u);
                data.u_expert = u;
                break;
            }
        }
    }
    let problem = lqr_problem(&data)?;
    let (m, n) = (data.dim_z(), data.dim_p());
    let name = if u_lim.is_some() {
        "inverse_lqr_barrier"
    } else {
        "inverse_lqr"
    };
    let mut inst = ProblemInstance::new(name, problem, vec![0.0; n], vec![0.0; m], seed);
    if u_lim.is_none() {
        inst.known_optimum = Some(KnownOptimum {
            p: Some(data.p_hidden.clone()),
            value: 0.0,
            note: "hidden reference reproduces the expert",
        });
    }
    inst.lqr = Some(data);
    Ok(inst)
}

fn lqr_problem(d: &LqrData) -> Result<BilevelProblem> {
    let (m, n) = (d.dim_z(), d.dim_p());
    let ns = d.horizon * d.state_dim;
    let data = std::sync::Arc::new(d.clone());
    let gtg = d.gamma.transpose().matmul(&d.gamma)?;
    let hz_base = gtg.scale(2.0 * d.q).add_diagonal(2.0 * d.r)?;
    let hz_fu = gtg.scale(2.0).add_diagonal(2.0)?;
    let mut dp_k = Matrix::zeros(m, n);
    for i in 0..m {
        for j in 0..ns {
            dp_k[(i, j)] = -2.0 * d.q * d.gamma[(j, i)];
        }
        dp_k[(i, ns + i)] = -2.0 * d.r;
    }

    let (du, dl, dk, dz) = (data.clone(), data.clone(), data.clone(), data);
    let barrier = d.barrier;
    let problem = BilevelProblem::with_objective(
        m,
        n,
        move |z, _| Ok(du.upper_loss(z)),
        move |z, p| {
            let (h, g) = dl.lower_quadratic(p)?;
            let hz = h.matvec(z)?;
            let quad = 0.5 * crate::linalg::dot(z, &hz) + crate::linalg::dot(&g, z);
            let pen = barrier.map_or(0.0, |b| b.value(z));
            Ok(quad + pen)
        },
    )
    .with_partials(Partials {
        k: Some(vector_fn(move |z, p| {
            let (xr, ur) = dk.split(p);
            let x = dk.states(z);
            let diff: Vec<f64> = x.iter().zip(xr).map(|(a, b)| a - b).collect();
            let gt = dk.gamma.tr_matvec(&diff)?;
            let mut k: Vec<f64> = (0..z.len())
                .map(|i| 2.0 * dk.q * gt[i] + 2.0 * dk.r * (z[i] - ur[i]))
                .collect();
            if let Some(b) = barrier {
                k.iter_mut().zip(b.gradient(z)).for_each(|(a, g)| *a += g);
            }
            Ok(k)
        })),
        dz_k: Some(matrix_fn(move |z, _| match barrier {
            Some(b) => {
                let mut h = hz_base.clone();
                for (i, v) in b.hessian_diag(z).into_iter().enumerate() {
                    h[(i, i)] += v;
                }
                check_finite(h, "D_z k")
            }
            None => Ok(hz_base.clone()),
        })),
        dp_k: Some(matrix_fn(move |_, _| Ok(dp_k.clone()))),
        dz_fu: Some(vector_fn(move |z, _| {
            let x = dz.states(z);
            let dx: Vec<f64> = x
                .iter()
                .zip(&dz.x_expert)
                .map(|(a, b)| 2.0 * (a - b))
                .collect();
            let gt = dz.gamma.tr_matvec(&dx)?;
            Ok(gt
                .iter()
                .zip(z)
                .zip(&dz.u_expert)
                .map(|((g, u), e)| g + 2.0 * (u - e))
                .collect())
        })),
        dp_fu: Some(vector_fn(move |_, _| Ok(vec![0.0; n]))),
        hp_k: Some(stacked_fn(move |_, _| Ok(StackedMatrix::zeros(m, n, n)))),
        dpz_k: Some(stacked_fn(move |_, _| Ok(StackedMatrix::zeros(m, n, m)))),
        dzp_k: Some(stacked_fn(move |_, _| Ok(StackedMatrix::zeros(m, m, n)))),
        hz_k: Some(stacked_fn(move |z, _| {
            let mut data = vec![0.0; m * m * m];
            if let Some(b) = barrier {
                for (i, t) in b.third_diag(z).into_iter().enumerate() {
                    data[i * m * m + i * m + i] = t;
                }
            }
            StackedMatrix::new(
                m,
                m,
                m,
                check_finite(Matrix::from_raw(m * m, m, data), "H_z k")?,
            )
        })),
        hp_fu: Some(matrix_fn(move |_, _| Ok(Matrix::zeros(n, n)))),
        hz_fu: Some(matrix_fn(move |_, _| Ok(hz_fu.clone()))),
        dzp_fu: Some(matrix_fn(move |_, _| Ok(Matrix::zeros(m, n)))),
    });
    Ok(problem)
}

/// Dense random derivative bundles at an abstract point, for timing and
/// equivalence checks. `D_z k = 3I + G/√m` with standard-normal `G`, so
/// it is comfortably invertible.
pub fn random_bundles(
    m: usize,
    n: usize,
    seed: u64,
) -> Result<(FirstOrderBundle, SecondOrderBundle)> {
    if m == 0 || n == 0 {
        return Err(Error::InvalidArgument(
            "bundle dimensions must be positive".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |rows: usize, cols: usize| {
        Matrix::from_raw(
            rows,
            cols,
            (0..rows * cols).map(|_| normal(&mut rng)).collect(),
        )
    };
    let dz_k = draw(m, m)
        .scale(1.0 / (m as f64).sqrt())
        .add_diagonal(3.0)?;
    let fb = FirstOrderBundle {
        dz_k,
        dp_k: draw(m, n),
        dz_fu: draw(1, m),
        dp_fu: draw(1, n),
        provenance: FirstProvenance {
            dz_k: Source::Analytic,
            dp_k: Source::Analytic,
            dz_fu: Source::Analytic,
            dp_fu: Source::Analytic,
        },
    };
    let hp_fu = draw(n, n);
    let hz_fu = draw(m, m);
    let sb = SecondOrderBundle {
        hp_k: StackedMatrix::new(m, n, n, draw(m * n, n))?,
        dpz_k: StackedMatrix::new(m, n, m, draw(m * n, m))?,
        dzp_k: StackedMatrix::new(m, m, n, draw(m * m, n))?,
        hz_k: StackedMatrix::new(m, m, m, draw(m * m, m))?,
        hp_fu: hp_fu.add(&hp_fu.transpose())?,
        hz_fu: hz_fu.add(&hz_fu.transpose())?,
        dzp_fu: draw(m, n),
        provenance: SecondProvenance {
            hp_k: Source::Analytic,
            dpz_k: Source::Analytic,
            dzp_k: Source::Analytic,
            hz_k: Source::Analytic,
            hp_fu: Source::Analytic,
            hz_fu: Source::Analytic,
            dzp_fu: Source::Analytic,
        },
    };
    Ok((fb, sb))
}
