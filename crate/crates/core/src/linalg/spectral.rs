use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{dot, factorize, norm, Matrix};
use crate::error::{Error, Result};

/// Result of [`min_gain`]: `value` is the estimated smallest singular value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GainEstimate {
    pub value: f64,
    pub iterations: usize,
    /// False when the iteration cap was hit; `value` is then the best estimate.
    pub converged: bool,
}

const GAIN_TOL: f64 = 1e-10;
const GAIN_MAX_ITER: usize = 500;

fn start_vector(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let s = norm(&v);
    v.iter_mut().for_each(|x| *x /= s);
    v
}

/// Smallest singular value of a square matrix: the largest `α` with
/// `‖Av‖ ≥ α‖v‖` for all `v`.
///
/// Inverse power iteration on `AᵀA`, reusing one LU factorization of `A`.
/// Each sweep reports the achieved ratio `‖Ay‖/‖y‖` for the current iterate.
pub fn min_gain(a: &Matrix) -> Result<GainEstimate> {
    if !a.is_square() {
        return Err(Error::NonSquare {
            rows: a.rows(),
            cols: a.cols(),
        });
    }
    let n = a.rows();
    if n == 0 {
        return Ok(GainEstimate {
            value: 0.0,
            iterations: 0,
            converged: true,
        });
    }
    let f = factorize(a)?;
    if f.is_singular() {
        return Ok(GainEstimate {
            value: 0.0,
            iterations: 0,
            converged: true,
        });
    }
    let mut x = start_vector(n, 0x5eed);
    let mut estimate = f64::INFINITY;
    for it in 1..=GAIN_MAX_ITER {
        // A⁻ᵀ x then A⁻¹ A⁻ᵀ x
        let w = f.solve_transpose_vec(&x)?;
        let y = f.solve_vec(&w)?;
        let ny = norm(&y);
        if ny == 0.0 || !ny.is_finite() {
            return Ok(GainEstimate {
                value: 0.0,
                iterations: it,
                converged: true,
            });
        }
        // A y = w, so ‖Ay‖/‖y‖ = ‖w‖/‖y‖.
        let next = norm(&w) / ny;
        x = y.iter().map(|v| v / ny).collect();
        if (estimate - next).abs() <= GAIN_TOL * next {
            return Ok(GainEstimate {
                value: next.min(estimate),
                iterations: it,
                converged: true,
            });
        }
        estimate = next;
    }
    Ok(GainEstimate {
        value: estimate,
        iterations: GAIN_MAX_ITER,
        converged: false,
    })
}

/// Operator 2-norm (largest singular value) by power iteration on `AᵀA`.
pub fn op_norm(a: &Matrix) -> f64 {
    if a.max_abs() == 0.0 {
        return 0.0;
    }
    let mut x = start_vector(a.cols(), 0xface);
    let mut estimate = 0.0;
    for _ in 0..2000 {
        let ax = a.matvec(&x).expect("shape checked");
        let next = norm(&ax);
        let mut y = a.tr_matvec(&ax).expect("shape checked");
        let ny = norm(&y);
        if ny == 0.0 {
            return next;
        }
        y.iter_mut().for_each(|v| *v /= ny);
        x = y;
        if (next - estimate).abs() <= 1e-14 * next {
            return next;
        }
        estimate = next;
    }
    estimate
}

/// Lower Cholesky factor of a symmetric matrix; `None` unless positive definite.
pub fn cholesky(a: &Matrix) -> Option<Matrix> {
    if !a.is_square() {
        return None;
    }
    let n = a.rows();
    let mut l = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let s = a[(i, j)] - dot(&l.row(i)[..j], &l.row(j)[..j]);
            if i == j {
                if !(s > 0.0) || !s.is_finite() {
                    return None;
                }
                l[(i, i)] = s.sqrt();
            } else {
                l[(i, j)] = s / l[(j, j)];
            }
        }
    }
    Some(l)
}

/// Solves `L Lᵀ x = b` given the lower factor.
pub fn cholesky_solve(l: &Matrix, b: &[f64]) -> Vec<f64> {
    let n = l.rows();
    let mut y = b.to_vec();
    for i in 0..n {
        y[i] = (y[i] - dot(&l.row(i)[..i], &y[..i])) / l[(i, i)];
    }
    for i in (0..n).rev() {
        let mut s = y[i];
        for k in (i + 1)..n {
            s -= l[(k, i)] * y[k];
        }
        y[i] = s / l[(i, i)];
    }
    y
}

/// Leading `k` eigenpairs of a symmetric positive semidefinite matrix by
/// power iteration with deflation.
pub fn top_eigenpairs(a: &Matrix, k: usize) -> Result<Vec<(f64, Vec<f64>)>> {
    if !a.is_square() {
        return Err(Error::NonSquare {
            rows: a.rows(),
            cols: a.cols(),
        });
    }
    let n = a.rows();
    let mut found: Vec<(f64, Vec<f64>)> = Vec::with_capacity(k);
    for idx in 0..k.min(n) {
        let mut x = start_vector(n, 0xe16 + idx as u64);
        let mut lambda = 0.0;
        for _ in 0..20_000 {
            // project out earlier directions, then apply A
            for (_, v) in &found {
                let c = dot(&x, v);
                super::axpy(-c, v, &mut x);
            }
            let mut y = a.matvec(&x)?;
            for (_, v) in &found {
                let c = dot(&y, v);
                super::axpy(-c, v, &mut y);
            }
            let ny = norm(&y);
            if ny == 0.0 {
                lambda = 0.0;
                break;
            }
            let next = dot(&x, &y) / dot(&x, &x);
            y.iter_mut().for_each(|v| *v /= ny);
            let change = y
                .iter()
                .zip(&x)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            x = y;
            let settled = (next - lambda).abs() <= 1e-14 * next.abs().max(1e-300);
            lambda = next;
            if settled && change < 1e-10 {
                break;
            }
        }
        let nx = norm(&x);
        x.iter_mut().for_each(|v| *v /= nx);
        found.push((lambda.max(0.0), x));
    }
    Ok(found)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn min_gain_of_diagonal() {
        let g = min_gain(&Matrix::from_diag(&[2.0, 5.0])).unwrap();
        assert!(g.converged);
        assert!((g.value - 2.0).abs() < 1e-10);
        assert!((min_gain(&Matrix::identity(4)).unwrap().value - 1.0).abs() < 1e-12);
    }

    #[test]
    fn min_gain_of_shear() {
        // AᵀA = [[1,1],[1,2]]: λ_min = (3 − √5)/2, σ_min = √λ_min
        let a = Matrix::from_rows(&[vec![1.0, 1.0], vec![0.0, 1.0]]).unwrap();
        let expected = ((3.0 - 5.0_f64.sqrt()) / 2.0).sqrt();
        let g = min_gain(&a).unwrap();
        assert!(
            (g.value - expected).abs() < 1e-9,
            "{} vs {}",
            g.value,
            expected
        );
        assert!((expected - 0.618).abs() < 1e-3);
    }

    #[test]
    fn min_gain_of_singular_is_zero() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 4.0]]).unwrap();
        assert_eq!(min_gain(&a).unwrap().value, 0.0);
    }

    #[test]
    fn op_norm_of_diagonal() {
        assert!((op_norm(&Matrix::from_diag(&[2.0, -7.0, 1.0])) - 7.0).abs() < 1e-12);
        assert_eq!(op_norm(&Matrix::zeros(3, 2)), 0.0);
    }

    #[test]
    fn cholesky_detects_indefinite() {
        let spd = Matrix::from_rows(&[vec![4.0, 2.0], vec![2.0, 3.0]]).unwrap();
        let l = cholesky(&spd).unwrap();
        let x = cholesky_solve(&l, &[2.0, 1.0]);
        let back = spd.matvec(&x).unwrap();
        assert!((back[0] - 2.0).abs() < 1e-14 && (back[1] - 1.0).abs() < 1e-14);
        let indef = Matrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 1.0]]).unwrap();
        assert!(cholesky(&indef).is_none());
    }

    #[test]
    fn top_eigenpairs_of_diagonal() {
        let pairs = top_eigenpairs(&Matrix::from_diag(&[1.0, 9.0, 4.0]), 2).unwrap();
        assert!((pairs[0].0 - 9.0).abs() < 1e-10);
        assert!((pairs[1].0 - 4.0).abs() < 1e-10);
        assert!((pairs[0].1[1].abs() - 1.0).abs() < 1e-8);
        assert!((pairs[1].1[2].abs() - 1.0).abs() < 1e-8);
    }
}
