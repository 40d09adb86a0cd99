use bls_core::ift::{ift_jacobian, total_hessian};
use bls_core::instances::random_bundles;
use bls_core::linalg::{
    factorize, kron_left_apply, kron_right_apply, min_gain, op_norm, relative_error,
};
use bls_core::{HessianMode, HessianStrategy, Matrix, StackedMatrix};
use nalgebra::DMatrix;
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Matrix> {
    prop::collection::vec(-3.0..3.0f64, rows * cols)
        .prop_map(move |v| Matrix::new(rows, cols, v).unwrap())
}

fn dims() -> impl Strategy<Value = (usize, usize, usize, usize)> {
    (1..6usize, 1..6usize, 1..6usize, 1..6usize)
}

fn dense(m: &Matrix) -> DMatrix<f64> {
    DMatrix::from_row_slice(m.rows(), m.cols(), m.as_slice())
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    m.transpose().iter().copied().collect()
}

/// `A: m×n` with `n` blocks of `p×r`.
fn left_operands() -> impl Strategy<Value = (Matrix, StackedMatrix)> {
    dims().prop_flat_map(|(m, n, p, r)| {
        (
            matrix(m, n),
            matrix(n * p, r).prop_map(move |c| StackedMatrix::new(n, p, r, c).unwrap()),
        )
    })
}

/// `B: m×n` with `p` blocks of `n×r`.
fn right_operands() -> impl Strategy<Value = (Matrix, StackedMatrix)> {
    dims().prop_flat_map(|(m, n, p, r)| {
        (
            matrix(m, n),
            matrix(p * n, r).prop_map(move |c| StackedMatrix::new(p, n, r, c).unwrap()),
        )
    })
}

/// `nI + G` is invertible with a comfortable margin for entries in `[-1, 1]`.
fn well_conditioned(n: usize) -> impl Strategy<Value = Matrix> {
    prop::collection::vec(-1.0..1.0f64, n * n).prop_map(move |v| {
        Matrix::new(n, n, v)
            .unwrap()
            .add_diagonal(n as f64 + 1.0)
            .unwrap()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn kron_left_matches_dense((a, c) in left_operands()) {
        let p = c.block_rows();
        let got = kron_left_apply(&a, &c).unwrap();
        let want = dense(&a).kronecker(&DMatrix::identity(p, p)) * dense(c.data());
        prop_assert!(relative_error(got.data().as_slice(), &row_major(&want)) <= 1e-12);
    }

    #[test]
    fn kron_right_matches_dense((b, c) in right_operands()) {
        let p = c.blocks();
        let got = kron_right_apply(&b, &c).unwrap();
        let want = DMatrix::<f64>::identity(p, p).kronecker(&dense(&b)) * dense(c.data());
        prop_assert!(relative_error(got.data().as_slice(), &row_major(&want)) <= 1e-12);
    }

    #[test]
    fn kron_left_is_linear(a in matrix(3, 4), x in matrix(8, 3), y in matrix(8, 3), s in -2.0..2.0f64) {
        let cx = StackedMatrix::new(4, 2, 3, x.clone()).unwrap();
        let cy = StackedMatrix::new(4, 2, 3, y.clone()).unwrap();
        let combo = StackedMatrix::new(4, 2, 3, x.scale(s).add(&y).unwrap()).unwrap();
        let lhs = kron_left_apply(&a, &combo).unwrap();
        let rhs = kron_left_apply(&a, &cx).unwrap().scale(s).add(&kron_left_apply(&a, &cy).unwrap()).unwrap();
        prop_assert!(relative_error(lhs.data().as_slice(), rhs.data().as_slice()) <= 1e-12);
    }

    #[test]
    fn kron_right_is_linear(b in matrix(3, 2), x in matrix(8, 3), y in matrix(8, 3), s in -2.0..2.0f64) {
        let cx = StackedMatrix::new(4, 2, 3, x.clone()).unwrap();
        let cy = StackedMatrix::new(4, 2, 3, y.clone()).unwrap();
        let combo = StackedMatrix::new(4, 2, 3, x.scale(s).add(&y).unwrap()).unwrap();
        let lhs = kron_right_apply(&b, &combo).unwrap();
        let rhs = kron_right_apply(&b, &cx).unwrap().scale(s).add(&kron_right_apply(&b, &cy).unwrap()).unwrap();
        prop_assert!(relative_error(lhs.data().as_slice(), rhs.data().as_slice()) <= 1e-12);
    }

    #[test]
    fn factorization_round_trips(a in well_conditioned(5), b in matrix(5, 3)) {
        let x = factorize(&a).unwrap().solve(&b).unwrap();
        let back = a.matmul(&x).unwrap();
        prop_assert!(relative_error(back.as_slice(), b.as_slice()) <= 1e-12);
        let oracle = dense(&a).lu().solve(&dense(&b)).unwrap();
        prop_assert!(relative_error(x.as_slice(), &row_major(&oracle)) <= 1e-12);
    }

    #[test]
    fn transposed_solve_round_trips(a in well_conditioned(6), b in prop::collection::vec(-3.0..3.0f64, 6)) {
        let x = factorize(&a).unwrap().solve_transpose_vec(&b).unwrap();
        let back = a.tr_matvec(&x).unwrap();
        prop_assert!(relative_error(&back, &b) <= 1e-12);
    }

    #[test]
    fn min_gain_is_a_lower_bound(a in matrix(4, 4), v in prop::collection::vec(-3.0..3.0f64, 4)) {
        let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        prop_assume!(nv > 1e-6);
        let gain = min_gain(&a).unwrap().value;
        let av = a.matvec(&v).unwrap();
        let ratio = av.iter().map(|x| x * x).sum::<f64>().sqrt() / nv;
        prop_assert!(gain <= ratio * (1.0 + 1e-9) + 1e-12);
        let sv = dense(&a).singular_values().min();
        prop_assert!((gain - sv).abs() <= 1e-8 * op_norm(&a).max(1.0));
    }

    #[test]
    fn fast_and_full_hessians_agree(m in 1..12usize, n in 1..5usize, seed in any::<u64>()) {
        let (fb, sb) = random_bundles(m, n, seed).unwrap();
        let sens = ift_jacobian(&fb, 0.0).unwrap();
        let fast = total_hessian(&fb, &sb, &sens, HessianMode::General, HessianStrategy::Fast).unwrap();
        let full = total_hessian(&fb, &sb, &sens, HessianMode::General, HessianStrategy::Full).unwrap();
        prop_assert!(relative_error(fast.as_slice(), full.as_slice()) <= 1e-9);
        prop_assert_eq!(fast.max_asymmetry(), 0.0);
    }

    #[test]
    fn regularized_jacobian_tends_to_exact(m in 2..8usize, n in 1..4usize, seed in any::<u64>()) {
        let (fb, _) = random_bundles(m, n, seed).unwrap();
        let exact = ift_jacobian(&fb, 0.0).unwrap().dp_z;
        let near = ift_jacobian(&fb, 1e-10).unwrap().dp_z;
        prop_assert!(relative_error(near.as_slice(), exact.as_slice()) <= 1e-8);
    }
}
