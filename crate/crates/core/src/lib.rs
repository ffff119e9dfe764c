//! Group-Lasso regularized calibrated estimation of treatment means and
//! treatment effects with multi-valued treatments.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod diagnostics;
pub mod engine;
pub mod error;
pub mod estimands;
pub mod or;
pub mod pipeline;
pub mod ps;
mod scalar;
pub mod simulation;
pub mod tuning;

pub use data::{Dataset, Standardization};
pub use engine::{LossAdapter, SolveConfig, SolveResult, Solver};
pub use error::{Error, Result};
pub use estimands::{EstimateMethod, EstimateReport, Interval};
pub use or::{Link, OrMethod, OrModel};
pub use ps::{Constraint, PsMethod, PsModel};
pub use scalar::Scalar;
pub use tuning::{CvPath, CvProblem, Selection};

pub type Dataset64 = Dataset<f64>;
pub type PsModel64 = PsModel<f64>;
pub type SolveConfig64 = SolveConfig<f64>;
pub type OrModel64 = OrModel<f64>;
pub type EstimateReport64 = EstimateReport<f64>;
