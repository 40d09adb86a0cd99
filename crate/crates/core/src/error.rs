use thiserror::Error;

/// Errors raised anywhere in the sensitivity pipeline.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("matrix must be square, got {rows}x{cols}")]
    NonSquare { rows: usize, cols: usize },

    #[error("dimension mismatch in {op}: expected {expected}, found {found}")]
    DimensionMismatch {
        op: &'static str,
        expected: String,
        found: String,
    },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("matrix is singular (smallest pivot {min_pivot:e}, threshold {threshold:e})")]
    SingularMatrix { min_pivot: f64, threshold: f64 },

    #[error(
        "linear system D_z k is singular (smallest pivot {min_pivot:e}); \
         retry with a regularization epsilon > 0 and account for it in the regularized bound"
    )]
    SingularSystem { min_pivot: f64 },

    #[error("evaluator failed: {0}")]
    Evaluator(String),

    #[error("numeric differentiation failed: {0}")]
    NumericDiff(String),

    #[error(
        "lower-level solve failed after {iterations} iterations (residual {residual:e}): {reason}"
    )]
    LowerSolve {
        iterations: usize,
        residual: f64,
        reason: String,
    },

    #[error("line search failed after {backtracks} backtracks")]
    LineSearch { backtracks: usize },

    #[error("bound is infinite: {0}")]
    InfiniteBound(&'static str),

    #[error("optimization path is degenerate: {0}")]
    DegeneratePath(String),

    #[error("expert trajectory violates the control limit {u_lim} (max |u| = {max_control})")]
    InfeasibleExpert { u_lim: f64, max_control: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn dims(op: &'static str, expected: impl ToString, found: impl ToString) -> Self {
        Error::DimensionMismatch {
            op,
            expected: expected.to_string(),
            found: found.to_string(),
        }
    }
}
