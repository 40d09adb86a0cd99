use super::{axpy, gemm, Matrix};
use crate::error::{Error, Result};

/// `q` blocks of `r×c`, stacked vertically into a `(q·r)×c` matrix.
///
/// Block `i` is the derivative of the `i`-th scalar output of the
/// differentiated function, e.g. `H_p k` holds `H_p k_i` in block `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct StackedMatrix {
    blocks: usize,
    block_rows: usize,
    block_cols: usize,
    data: Matrix,
}

impl StackedMatrix {
    pub fn new(blocks: usize, block_rows: usize, block_cols: usize, data: Matrix) -> Result<Self> {
        if data.rows() != blocks * block_rows || data.cols() != block_cols {
            return Err(Error::dims(
                "StackedMatrix::new",
                format!("{}x{}", blocks * block_rows, block_cols),
                format!("{}x{}", data.rows(), data.cols()),
            ));
        }
        Ok(Self {
            blocks,
            block_rows,
            block_cols,
            data,
        })
    }

    pub fn zeros(blocks: usize, block_rows: usize, block_cols: usize) -> Self {
        Self {
            blocks,
            block_rows,
            block_cols,
            data: Matrix::zeros(blocks * block_rows, block_cols),
        }
    }

    pub fn from_blocks(blocks: &[Matrix]) -> Result<Self> {
        let Some(first) = blocks.first() else {
            return Err(Error::InvalidArgument(
                "at least one block is required".into(),
            ));
        };
        let (r, c) = first.shape();
        let mut data = Vec::with_capacity(blocks.len() * r * c);
        for b in blocks {
            if b.shape() != (r, c) {
                return Err(Error::dims(
                    "StackedMatrix::from_blocks",
                    format!("{r}x{c}"),
                    format!("{}x{}", b.rows(), b.cols()),
                ));
            }
            data.extend_from_slice(b.as_slice());
        }
        Ok(Self {
            blocks: blocks.len(),
            block_rows: r,
            block_cols: c,
            data: Matrix::from_raw(blocks.len() * r, c, data),
        })
    }

    #[inline]
    pub fn blocks(&self) -> usize {
        self.blocks
    }

    #[inline]
    pub fn block_rows(&self) -> usize {
        self.block_rows
    }

    #[inline]
    pub fn block_cols(&self) -> usize {
        self.block_cols
    }

    pub fn data(&self) -> &Matrix {
        &self.data
    }

    pub fn into_data(self) -> Matrix {
        self.data
    }

    fn block_len(&self) -> usize {
        self.block_rows * self.block_cols
    }

    /// Row-major entries of block `i`.
    pub fn block_slice(&self, i: usize) -> &[f64] {
        let len = self.block_len();
        &self.data.as_slice()[i * len..(i + 1) * len]
    }

    pub fn block(&self, i: usize) -> Matrix {
        Matrix::from_raw(
            self.block_rows,
            self.block_cols,
            self.block_slice(i).to_vec(),
        )
    }

    pub fn iter_blocks(&self) -> impl Iterator<Item = Matrix> + '_ {
        (0..self.blocks).map(|i| self.block(i))
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.frobenius_norm()
    }

    fn same_layout(&self, other: &StackedMatrix, op: &'static str) -> Result<()> {
        if (self.blocks, self.block_rows, self.block_cols)
            != (other.blocks, other.block_rows, other.block_cols)
        {
            return Err(Error::dims(
                op,
                format!(
                    "{} blocks of {}x{}",
                    self.blocks, self.block_rows, self.block_cols
                ),
                format!(
                    "{} blocks of {}x{}",
                    other.blocks, other.block_rows, other.block_cols
                ),
            ));
        }
        Ok(())
    }

    pub fn add(&self, other: &StackedMatrix) -> Result<StackedMatrix> {
        self.same_layout(other, "StackedMatrix::add")?;
        Ok(Self {
            data: self.data.add(&other.data)?,
            ..*self
        })
    }

    pub fn sub(&self, other: &StackedMatrix) -> Result<StackedMatrix> {
        self.same_layout(other, "StackedMatrix::sub")?;
        Ok(Self {
            data: self.data.sub(&other.data)?,
            ..*self
        })
    }

    pub fn scale(&self, s: f64) -> StackedMatrix {
        Self {
            data: self.data.scale(s),
            ..*self
        }
    }

    /// Right-multiplies every block by `m`; this is the plain product of the
    /// tall data matrix with `m`.
    pub fn matmul_right(&self, m: &Matrix) -> Result<StackedMatrix> {
        let data = self.data.matmul(m)?;
        Ok(Self {
            blocks: self.blocks,
            block_rows: self.block_rows,
            block_cols: m.cols(),
            data,
        })
    }

    /// Transposes each block in place of the stack.
    pub fn transpose_blocks(&self) -> StackedMatrix {
        let mut data = Vec::with_capacity(self.data.as_slice().len());
        for i in 0..self.blocks {
            data.extend_from_slice(self.block(i).transpose().as_slice());
        }
        Self {
            blocks: self.blocks,
            block_rows: self.block_cols,
            block_cols: self.block_rows,
            data: Matrix::from_raw(self.blocks * self.block_cols, self.block_rows, data),
        }
    }
}

/// `(A ⊗ I_p) C` for `A: m×n` and `C` holding `n` blocks of `p×r`.
///
/// Output block `i` is `Σ_l A_il C_l`. The Kronecker product is never formed;
/// with the blocks flattened into rows this is an `(m×n)·(n×p·r)` product.
pub fn kron_left_apply(a: &Matrix, c: &StackedMatrix) -> Result<StackedMatrix> {
    if c.blocks() != a.cols() {
        return Err(Error::dims(
            "kron_left_apply",
            format!("{} blocks", a.cols()),
            format!("{} blocks", c.blocks()),
        ));
    }
    let width = c.block_len();
    let out = gemm(a.rows(), a.cols(), width, a.as_slice(), c.data().as_slice());
    StackedMatrix::new(
        a.rows(),
        c.block_rows(),
        c.block_cols(),
        Matrix::from_raw(a.rows() * c.block_rows(), c.block_cols(), out),
    )
}

/// `(I_p ⊗ B) C` for `B: m×n` and `C` holding `p` blocks of `n×r`.
///
/// Output block `i` is `B·C_i`.
pub fn kron_right_apply(b: &Matrix, c: &StackedMatrix) -> Result<StackedMatrix> {
    if c.block_rows() != b.cols() {
        return Err(Error::dims(
            "kron_right_apply",
            format!("blocks with {} rows", b.cols()),
            format!("blocks with {} rows", c.block_rows()),
        ));
    }
    let (m, n, r) = (b.rows(), b.cols(), c.block_cols());
    let mut out = vec![0.0; c.blocks() * m * r];
    for blk in 0..c.blocks() {
        let src = c.block_slice(blk);
        let dst = &mut out[blk * m * r..(blk + 1) * m * r];
        for i in 0..m {
            let dst_row = &mut dst[i * r..(i + 1) * r];
            for l in 0..n {
                let b_il = b[(i, l)];
                if b_il != 0.0 {
                    axpy(b_il, &src[l * r..(l + 1) * r], dst_row);
                }
            }
        }
    }
    StackedMatrix::new(c.blocks(), m, r, Matrix::from_raw(c.blocks() * m, r, out))
}
