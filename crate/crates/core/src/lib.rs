//! Second-order implicit sensitivities for bilevel programs.
//!
//! A bilevel program minimizes `f_U(z*(p), p)` where `z*(p)` solves a lower
//! problem characterized by `k(z*, p) = 0`. This crate computes `D_p z*`,
//! `H_p z*` and the total derivatives of the upper objective through the
//! implicit function theorem, bounds their error at inexact lower solutions,
//! and drives first- and second-order upper-level optimizers.

pub mod bounds;
pub mod derivatives;
pub mod error;
pub mod gradcheck;
pub mod ift;
pub mod instances;
pub mod linalg;
pub mod problem;
pub mod solvers;

pub use bounds::{BoundConstants, EpsilonChoice, RealizedErrors};
pub use derivatives::DiffConfig;
pub use error::{Error, Result};
pub use gradcheck::{gradcheck, GradcheckReport, GradcheckTolerances};
pub use ift::{HessianMode, HessianStrategy, SensitivityResult};
pub use instances::ProblemInstance;
pub use linalg::{Matrix, StackedMatrix};
pub use problem::{BilevelProblem, FirstOrderBundle, LowerSolution, Partials, SecondOrderBundle};
pub use solvers::{LowerConfig, OptimTrace, TraceStatus, UpperConfig, UpperMethod};
