//! Implicit first and second derivatives of the lower solution and the total
//! derivatives of the upper objective.
//!
//! With `J = D_p z* = −(D_z k)⁻¹ D_p k`, the implicit Hessian is
//!
//! ```text
//! H_p z* = −[(D_z k)⁻¹ ⊗ I] [ H_p k + (D_pz k) J
//!                              + (I ⊗ Jᵀ)(D_zp k) + (I ⊗ Jᵀ)(H_z k) J ]
//! ```
//!
//! and the total Hessian of `f_U(z*(p), p)` is
//! `H_p f_U + Jᵀ H_z f_U J + (D_z f_U ⊗ I) H_p z*`, plus the mixed terms
//! `Jᵀ D_zp f_U + (D_zp f_U)ᵀ J` when `f_U` couples `z` and `p` directly.

use crate::error::{Error, Result};
use crate::linalg::{
    factorize, kron_left_apply, kron_right_apply, Factorization, Matrix, StackedMatrix,
};
use crate::problem::{FirstOrderBundle, SecondOrderBundle};

/// Implicit derivatives at one point, with the factorization of
/// `D_z k + εI` kept for later solves.
#[derive(Debug, Clone)]
pub struct SensitivityResult {
    /// `D_p z*`, `m×n`
    pub dp_z: Matrix,
    /// `H_p z*`, `m` blocks of `n×n`, once computed
    pub hp_z: Option<StackedMatrix>,
    /// sensitivity vector `v` with `vᵀ = D_z f_U (D_z k + εI)⁻¹`, once computed
    pub v: Option<Vec<f64>>,
    /// regularization added to the diagonal of `D_z k` (0 = none)
    pub epsilon: f64,
    factorization: Factorization,
}

impl SensitivityResult {
    pub fn factorization(&self) -> &Factorization {
        &self.factorization
    }

    /// Computes and stores `H_p z*`.
    pub fn compute_hessian(
        &mut self,
        fb: &FirstOrderBundle,
        sb: &SecondOrderBundle,
    ) -> Result<&StackedMatrix> {
        let h = ift_hessian(fb, sb, self)?;
        Ok(self.hp_z.insert(h))
    }

    /// Computes and stores the sensitivity vector.
    pub fn compute_sensitivity_vector(&mut self, fb: &FirstOrderBundle) -> Result<&[f64]> {
        let v = sensitivity_vector(fb, self)?;
        Ok(self.v.insert(v))
    }
}

fn singular(f: &Factorization) -> Error {
    Error::SingularSystem {
        min_pivot: f.min_pivot(),
    }
}

fn map_singular(e: Error) -> Error {
    match e {
        Error::SingularMatrix { min_pivot, .. } => Error::SingularSystem { min_pivot },
        other => other,
    }
}

/// `D_p z* = −(D_z k + εI)⁻¹ D_p k`.
///
/// Singular systems are reported rather than silently regularized; pass
/// `epsilon > 0` explicitly to regularize.
pub fn ift_jacobian(fb: &FirstOrderBundle, epsilon: f64) -> Result<SensitivityResult> {
    if !(epsilon >= 0.0) || !epsilon.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "epsilon must be finite and ≥ 0, got {epsilon}"
        )));
    }
    let m = fb.dz_k.rows();
    if fb.dp_k.rows() != m {
        return Err(Error::dims("ift_jacobian: D_p k rows", m, fb.dp_k.rows()));
    }
    let a = if epsilon > 0.0 {
        fb.dz_k.add_diagonal(epsilon)?
    } else {
        fb.dz_k.clone()
    };
    let factorization = factorize(&a)?;
    if factorization.is_singular() {
        return Err(singular(&factorization));
    }
    let dp_z = factorization
        .solve(&fb.dp_k)
        .map_err(map_singular)?
        .scale(-1.0);
    Ok(SensitivityResult {
        dp_z,
        hp_z: None,
        v: None,
        epsilon,
        factorization,
    })
}

fn check_second(
    fb: &FirstOrderBundle,
    sb: &SecondOrderBundle,
    dp_z: &Matrix,
) -> Result<(usize, usize)> {
    let (m, n) = dp_z.shape();
    let layout = |s: &StackedMatrix| (s.blocks(), s.block_rows(), s.block_cols());
    let checks = [
        ("H_p k", layout(&sb.hp_k), (m, n, n)),
        ("D_pz k", layout(&sb.dpz_k), (m, n, m)),
        ("D_zp k", layout(&sb.dzp_k), (m, m, n)),
        ("H_z k", layout(&sb.hz_k), (m, m, m)),
    ];
    for (what, got, want) in checks {
        if got != want {
            return Err(Error::dims(what, format!("{want:?}"), format!("{got:?}")));
        }
    }
    if fb.dz_k.shape() != (m, m) {
        return Err(Error::dims(
            "D_z k",
            format!("{m}x{m}"),
            format!("{:?}", fb.dz_k.shape()),
        ));
    }
    Ok((m, n))
}

/// The bracket of the implicit-Hessian formula, `m` blocks of `n×n`:
///
/// `H_p k + (D_pz k) J + (I ⊗ Jᵀ)(D_zp k) + (I ⊗ Jᵀ)(H_z k) J`.
pub fn ift_bracket(
    fb: &FirstOrderBundle,
    sb: &SecondOrderBundle,
    dp_z: &Matrix,
) -> Result<StackedMatrix> {
    check_second(fb, sb, dp_z)?;
    let jt = dp_z.transpose();
    let pz_term = sb.dpz_k.matmul_right(dp_z)?;
    let zp_term = kron_right_apply(&jt, &sb.dzp_k)?;
    let zz_term = kron_right_apply(&jt, &sb.hz_k.matmul_right(dp_z)?)?;
    sb.hp_k.add(&pz_term)?.add(&zp_term)?.add(&zz_term)
}

/// `H_p z* = −[(D_z k + εI)⁻¹ ⊗ I]·bracket`, reusing the cached
/// factorization.
pub fn ift_hessian(
    fb: &FirstOrderBundle,
    sb: &SecondOrderBundle,
    sens: &SensitivityResult,
) -> Result<StackedMatrix> {
    let bracket = ift_bracket(fb, sb, &sens.dp_z)?;
    Ok(sens
        .factorization
        .solve_stacked(&bracket)
        .map_err(map_singular)?
        .scale(-1.0))
}

/// `v` with `vᵀ = D_z f_U (D_z k + εI)⁻¹`, one transposed solve.
pub fn sensitivity_vector(fb: &FirstOrderBundle, sens: &SensitivityResult) -> Result<Vec<f64>> {
    if fb.dz_fu.shape() != (1, sens.factorization.size()) {
        return Err(Error::dims(
            "sensitivity_vector: D_z f_U",
            sens.factorization.size(),
            fb.dz_fu.cols(),
        ));
    }
    sens.factorization
        .solve_transpose_vec(fb.dz_fu.as_slice())
        .map_err(map_singular)
}

/// `D_p f_U + D_z f_U · D_p z*` as a `1×n` row.
pub fn total_gradient(fb: &FirstOrderBundle, sens: &SensitivityResult) -> Result<Matrix> {
    fb.dp_fu.add(&fb.dz_fu.matmul(&sens.dp_z)?)
}

/// Whether the mixed upper partial `D_zp f_U` enters the total Hessian.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum HessianMode {
    /// Includes `Jᵀ D_zp f_U + (D_zp f_U)ᵀ J`; correct for any `f_U`.
    #[default]
    General,
    /// Omits the mixed terms; exact only when `f_U` has no direct `z`-`p`
    /// coupling.
    PaperExact,
}

/// How the `(D_z f_U ⊗ I) H_p z*` term is evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum HessianStrategy {
    /// Forms `H_p z*` and contracts it.
    Full,
    /// Contracts the bracket with `−vᵀ` first, never forming `H_p z*`.
    #[default]
    Fast,
}

/// Total Hessian of `p ↦ f_U(z*(p), p)`, symmetrized.
pub fn total_hessian(
    fb: &FirstOrderBundle,
    sb: &SecondOrderBundle,
    sens: &SensitivityResult,
    mode: HessianMode,
    strategy: HessianStrategy,
) -> Result<Matrix> {
    let (m, n) = check_second(fb, sb, &sens.dp_z)?;
    let j = &sens.dp_z;
    let jt = j.transpose();

    let implicit = match strategy {
        HessianStrategy::Full => {
            let hp_z = match &sens.hp_z {
                Some(h) => h.clone(),
                None => ift_hessian(fb, sb, sens)?,
            };
            kron_left_apply(&fb.dz_fu, &hp_z)?.block(0)
        }
        HessianStrategy::Fast => {
            let v = match &sens.v {
                Some(v) => v.clone(),
                None => sensitivity_vector(fb, sens)?,
            };
            let w = Matrix::row_vector(&v).scale(-1.0);
            // weighted sums Σ_i w_i (·)_i of each bracket ingredient
            let hp = kron_left_apply(&w, &sb.hp_k)?.block(0);
            let pz = kron_left_apply(&w, &sb.dpz_k)?.block(0);
            let zp = kron_left_apply(&w, &sb.dzp_k)?.block(0);
            let zz = kron_left_apply(&w, &sb.hz_k)?.block(0);
            hp.add(&pz.matmul(j)?)?
                .add(&jt.matmul(&zp)?)?
                .add(&jt.matmul(&zz)?.matmul(j)?)?
        }
    };

    if sb.hp_fu.shape() != (n, n) || sb.hz_fu.shape() != (m, m) || sb.dzp_fu.shape() != (m, n) {
        return Err(Error::dims(
            "total_hessian: upper partials",
            format!("n={n}, m={m}"),
            "other",
        ));
    }
    let mut h = sb
        .hp_fu
        .add(&jt.matmul(&sb.hz_fu)?.matmul(j)?)?
        .add(&implicit)?;
    if mode == HessianMode::General {
        let cross = jt.matmul(&sb.dzp_fu)?;
        h = h.add(&cross)?.add(&cross.transpose())?;
    }
    h.symmetrize()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{op_counts, reset_op_counts};
    use crate::problem::{FirstProvenance, SecondProvenance, Source};

    const A: Source = Source::Analytic;

    fn first(dz_k: Matrix, dp_k: Matrix, dz_fu: &[f64], dp_fu: &[f64]) -> FirstOrderBundle {
        FirstOrderBundle {
            dz_k,
            dp_k,
            dz_fu: Matrix::row_vector(dz_fu),
            dp_fu: Matrix::row_vector(dp_fu),
            provenance: FirstProvenance {
                dz_k: A,
                dp_k: A,
                dz_fu: A,
                dp_fu: A,
            },
        }
    }

    fn zero_second(m: usize, n: usize) -> SecondOrderBundle {
        SecondOrderBundle {
            hp_k: StackedMatrix::zeros(m, n, n),
            dpz_k: StackedMatrix::zeros(m, n, m),
            dzp_k: StackedMatrix::zeros(m, m, n),
            hz_k: StackedMatrix::zeros(m, m, m),
            hp_fu: Matrix::zeros(n, n),
            hz_fu: Matrix::zeros(m, m),
            dzp_fu: Matrix::zeros(m, n),
            provenance: SecondProvenance {
                hp_k: A,
                dpz_k: A,
                dzp_k: A,
                hz_k: A,
                hp_fu: A,
                hz_fu: A,
                dzp_fu: A,
            },
        }
    }

    /// k = z − cos p, f_U = z², at z = cos p.
    fn cos_bundles(p: f64) -> (FirstOrderBundle, SecondOrderBundle) {
        let z = p.cos();
        let fb = first(
            Matrix::identity(1),
            Matrix::row_vector(&[p.sin()]),
            &[2.0 * z],
            &[0.0],
        );
        let mut sb = zero_second(1, 1);
        sb.hp_k = StackedMatrix::from_blocks(&[Matrix::row_vector(&[p.cos()])]).unwrap();
        sb.hz_fu = Matrix::row_vector(&[2.0]);
        (fb, sb)
    }

    #[test]
    fn jacobian_of_diagonal_quadratic() {
        let fb = first(
            Matrix::from_diag(&[2.0, 4.0]),
            Matrix::identity(2).scale(-1.0),
            &[0.0, 0.0],
            &[0.0, 0.0],
        );
        let s = ift_jacobian(&fb, 0.0).unwrap();
        assert_eq!(s.dp_z, Matrix::from_diag(&[0.5, 0.25]));
    }

    #[test]
    fn jacobian_of_cos_fixed_point() {
        let (fb, _) = cos_bundles(std::f64::consts::FRAC_PI_2);
        let s = ift_jacobian(&fb, 0.0).unwrap();
        assert!((s.dp_z[(0, 0)] + 1.0).abs() < 1e-15);
    }

    #[test]
    fn parameter_independent_map_has_zero_jacobian() {
        let fb = first(
            Matrix::identity(3),
            Matrix::zeros(3, 2),
            &[1.0; 3],
            &[0.0; 2],
        );
        assert_eq!(ift_jacobian(&fb, 0.0).unwrap().dp_z, Matrix::zeros(3, 2));
    }

    #[test]
    fn singular_system_is_reported_and_regularization_is_opt_in() {
        let fb = first(
            Matrix::zeros(2, 2),
            Matrix::identity(2),
            &[0.0; 2],
            &[0.0; 2],
        );
        assert!(matches!(
            ift_jacobian(&fb, 0.0),
            Err(Error::SingularSystem { .. })
        ));
        let s = ift_jacobian(&fb, 0.5).unwrap();
        assert_eq!(s.epsilon, 0.5);
        assert_eq!(s.dp_z, Matrix::identity(2).scale(-2.0));
        assert!(ift_jacobian(&fb, -1.0).is_err());
    }

    #[test]
    fn implicit_hessian_of_cos() {
        for p in [0.0, 0.4, 1.3] {
            let (fb, sb) = cos_bundles(p);
            let s = ift_jacobian(&fb, 0.0).unwrap();
            let h = ift_hessian(&fb, &sb, &s).unwrap();
            assert!((h.block(0)[(0, 0)] + p.cos()).abs() < 1e-15);
        }
    }

    #[test]
    fn linear_map_has_zero_implicit_hessian() {
        let fb = first(
            Matrix::from_diag(&[2.0, 4.0]),
            Matrix::identity(2).scale(-1.0),
            &[1.0, 2.0],
            &[0.0, 0.0],
        );
        let sb = zero_second(2, 2);
        let s = ift_jacobian(&fb, 0.0).unwrap();
        assert_eq!(
            ift_hessian(&fb, &sb, &s).unwrap(),
            StackedMatrix::zeros(2, 2, 2)
        );
    }

    #[test]
    fn sensitivity_vector_examples() {
        let fb = first(
            Matrix::from_diag(&[2.0, 4.0]),
            Matrix::zeros(2, 1),
            &[1.0, 1.0],
            &[0.0],
        );
        let s = ift_jacobian(&fb, 0.0).unwrap();
        assert_eq!(sensitivity_vector(&fb, &s).unwrap(), vec![0.5, 0.25]);
        let fb = first(
            Matrix::identity(2),
            Matrix::zeros(2, 1),
            &[3.0, -1.0],
            &[0.0],
        );
        let s = ift_jacobian(&fb, 0.0).unwrap();
        assert_eq!(sensitivity_vector(&fb, &s).unwrap(), vec![3.0, -1.0]);
        let fb = first(
            Matrix::identity(2),
            Matrix::zeros(2, 1),
            &[0.0, 0.0],
            &[0.0],
        );
        assert_eq!(sensitivity_vector(&fb, &s).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn total_gradient_without_implicit_dependence() {
        let fb = first(
            Matrix::identity(2),
            Matrix::identity(2),
            &[0.0, 0.0],
            &[1.5, -2.0],
        );
        let s = ift_jacobian(&fb, 0.0).unwrap();
        assert_eq!(total_gradient(&fb, &s).unwrap().as_slice(), &[1.5, -2.0]);
    }

    #[test]
    fn total_hessian_of_cos_squared() {
        // d²/dp² cos²p = −2 cos 2p
        for p in [0.0, 0.3, 1.1] {
            let (fb, sb) = cos_bundles(p);
            let s = ift_jacobian(&fb, 0.0).unwrap();
            for strategy in [HessianStrategy::Full, HessianStrategy::Fast] {
                let h = total_hessian(&fb, &sb, &s, HessianMode::General, strategy).unwrap();
                assert!((h[(0, 0)] + 2.0 * (2.0 * p).cos()).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn mixed_upper_term_only_in_general_mode() {
        // f_U = z·p with k = z − p: f = p², total Hessian 2.
        let fb = first(
            Matrix::identity(1),
            Matrix::row_vector(&[-1.0]),
            &[0.7],
            &[0.7],
        );
        let mut sb = zero_second(1, 1);
        sb.dzp_fu = Matrix::row_vector(&[1.0]);
        let s = ift_jacobian(&fb, 0.0).unwrap();
        let general =
            total_hessian(&fb, &sb, &s, HessianMode::General, HessianStrategy::Fast).unwrap();
        let exact =
            total_hessian(&fb, &sb, &s, HessianMode::PaperExact, HessianStrategy::Fast).unwrap();
        assert_eq!(general[(0, 0)], 2.0);
        assert_eq!(exact[(0, 0)], 0.0);
    }

    #[test]
    fn fast_path_uses_one_factorization_and_one_extra_solve() {
        let (fb, sb) = cos_bundles(0.2);
        reset_op_counts();
        let s = ift_jacobian(&fb, 0.0).unwrap();
        let after_jac = op_counts();
        total_hessian(&fb, &sb, &s, HessianMode::General, HessianStrategy::Fast).unwrap();
        let after = op_counts();
        assert_eq!(after.factorizations, 1);
        assert_eq!(after.solves - after_jac.solves, 1);
    }
}
