use std::cell::Cell;

use super::{Matrix, StackedMatrix};
use crate::error::{Error, Result};

/// Pivots below `SINGULAR_RTOL·max|A|` mark the matrix singular.
pub const SINGULAR_RTOL: f64 = 1e-12;

/// Per-thread tally of factorizations and right-hand-side solves.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct OpCounts {
    pub factorizations: usize,
    /// One per right-hand-side vector (a forward/backward triangular pair).
    pub solves: usize,
}

thread_local! {
    static COUNTS: Cell<OpCounts> = const { Cell::new(OpCounts { factorizations: 0, solves: 0 }) };
}

pub fn op_counts() -> OpCounts {
    COUNTS.with(Cell::get)
}

pub fn reset_op_counts() {
    COUNTS.with(|c| c.set(OpCounts::default()));
}

fn bump(factorizations: usize, solves: usize) {
    COUNTS.with(|c| {
        let mut v = c.get();
        v.factorizations += factorizations;
        v.solves += solves;
        c.set(v);
    });
}

/// LU decomposition with partial pivoting, `P·A = L·U`.
///
/// A factorization whose smallest pivot falls under the singularity threshold
/// is still returned (so callers can inspect it) but refuses to solve.
#[derive(Clone, Debug)]
pub struct Factorization {
    n: usize,
    lu: Vec<f64>,
    perm: Vec<usize>,
    min_pivot: f64,
    threshold: f64,
    singular: bool,
}

pub fn factorize(a: &Matrix) -> Result<Factorization> {
    if !a.is_square() {
        return Err(Error::NonSquare {
            rows: a.rows(),
            cols: a.cols(),
        });
    }
    if !a.all_finite() {
        return Err(Error::NonFinite("matrix passed to factorize".into()));
    }
    bump(1, 0);
    let n = a.rows();
    let mut lu = a.as_slice().to_vec();
    let mut perm: Vec<usize> = (0..n).collect();
    let threshold = SINGULAR_RTOL * a.max_abs();
    let mut min_pivot = f64::INFINITY;

    for col in 0..n {
        let (piv_row, piv_abs) =
            (col..n)
                .map(|r| (r, lu[r * n + col].abs()))
                .fold(
                    (col, -1.0),
                    |best, cur| if cur.1 > best.1 { cur } else { best },
                );
        min_pivot = min_pivot.min(piv_abs);
        if piv_row != col {
            for j in 0..n {
                lu.swap(col * n + j, piv_row * n + j);
            }
            perm.swap(col, piv_row);
        }
        let pivot = lu[col * n + col];
        if pivot == 0.0 {
            continue;
        }
        for r in (col + 1)..n {
            let factor = lu[r * n + col] / pivot;
            lu[r * n + col] = factor;
            if factor != 0.0 {
                for j in (col + 1)..n {
                    lu[r * n + j] -= factor * lu[col * n + j];
                }
            }
        }
    }
    if n == 0 {
        min_pivot = 0.0;
    }
    let singular = n > 0 && !(min_pivot >= threshold && min_pivot > 0.0);
    Ok(Factorization {
        n,
        lu,
        perm,
        min_pivot,
        threshold,
        singular,
    })
}

impl Factorization {
    pub fn size(&self) -> usize {
        self.n
    }

    pub fn is_singular(&self) -> bool {
        self.singular
    }

    pub fn min_pivot(&self) -> f64 {
        self.min_pivot
    }

    fn check(&self, len: usize) -> Result<()> {
        if self.singular {
            return Err(Error::SingularMatrix {
                min_pivot: self.min_pivot,
                threshold: self.threshold,
            });
        }
        if len != self.n {
            return Err(Error::dims("Factorization::solve", self.n, len));
        }
        Ok(())
    }

    /// Solves `A x = b`.
    pub fn solve_vec(&self, b: &[f64]) -> Result<Vec<f64>> {
        self.check(b.len())?;
        let rhs = Matrix::column_vector(b);
        Ok(self.solve(&rhs)?.into_vec())
    }

    /// Solves `Aᵀ x = b` with the same factors.
    pub fn solve_transpose_vec(&self, b: &[f64]) -> Result<Vec<f64>> {
        self.check(b.len())?;
        bump(0, 1);
        let n = self.n;
        let lu = &self.lu;
        // Uᵀ y = b
        let mut y = b.to_vec();
        for i in 0..n {
            let mut s = y[i];
            for k in 0..i {
                s -= lu[k * n + i] * y[k];
            }
            y[i] = s / lu[i * n + i];
        }
        // Lᵀ w = y
        for i in (0..n).rev() {
            let mut s = y[i];
            for k in (i + 1)..n {
                s -= lu[k * n + i] * y[k];
            }
            y[i] = s;
        }
        let mut x = vec![0.0; n];
        for (i, &p) in self.perm.iter().enumerate() {
            x[p] = y[i];
        }
        Ok(x)
    }

    /// Solves `A X = B` for every column of `B` at once.
    pub fn solve(&self, b: &Matrix) -> Result<Matrix> {
        self.check(b.rows())?;
        let n = self.n;
        let w = b.cols();
        bump(0, w);
        let lu = &self.lu;
        let mut x = vec![0.0; n * w];
        for (i, &p) in self.perm.iter().enumerate() {
            x[i * w..(i + 1) * w].copy_from_slice(b.row(p));
        }
        for i in 0..n {
            let (done, rest) = x.split_at_mut(i * w);
            let row_i = &mut rest[..w];
            for k in 0..i {
                let l = lu[i * n + k];
                if l != 0.0 {
                    super::axpy(-l, &done[k * w..(k + 1) * w], row_i);
                }
            }
        }
        for i in (0..n).rev() {
            let (head, tail) = x.split_at_mut((i + 1) * w);
            let row_i = &mut head[i * w..];
            for k in (i + 1)..n {
                let u = lu[i * n + k];
                if u != 0.0 {
                    super::axpy(-u, &tail[(k - i - 1) * w..(k - i) * w], row_i);
                }
            }
            let d = lu[i * n + i];
            row_i.iter_mut().for_each(|v| *v /= d);
        }
        Ok(Matrix::from_raw(n, w, x))
    }

    /// `(A⁻¹ ⊗ I) C` for a stack of `n` blocks, using `(A ⊗ I)⁻¹ = A⁻¹ ⊗ I`.
    ///
    /// The stacked data viewed as an `n × (r·c)` matrix has block `l`
    /// flattened into row `l`, so this is one multi-column solve.
    pub fn solve_stacked(&self, c: &StackedMatrix) -> Result<StackedMatrix> {
        if c.blocks() != self.n {
            return Err(Error::dims(
                "Factorization::solve_stacked",
                self.n,
                c.blocks(),
            ));
        }
        let width = c.block_rows() * c.block_cols();
        let flat = Matrix::from_raw(self.n, width, c.data().as_slice().to_vec());
        let solved = self.solve(&flat)?;
        StackedMatrix::new(
            self.n,
            c.block_rows(),
            c.block_cols(),
            Matrix::from_raw(self.n * c.block_rows(), c.block_cols(), solved.into_vec()),
        )
    }
}
