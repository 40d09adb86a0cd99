//! Lower-level root finding, barrier smoothing of box constraints, upper
//! optimizers and loss-landscape projection.

mod barrier;
mod boxqp;
mod landscape;
mod lower;
mod upper;

pub use barrier::{apply_barrier, BarrierSpec, BoxBarrier};
pub use boxqp::solve_box_qp;
pub use landscape::{
    evaluate_landscape, loss_evaluator, pca_landscape, GridPoint, Landscape, PathPoint, PcaPlane,
};
pub use lower::{lower_solve_count, solve_lower, LowerConfig};
pub use upper::{optimize_upper, IterRecord, OptimTrace, TraceStatus, UpperConfig, UpperMethod};
