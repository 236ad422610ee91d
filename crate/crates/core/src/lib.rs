// NaN must fail every range check, so comparisons are written negated.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod beam;
pub mod calculus;
pub mod cli;
pub mod error;
pub mod field;
pub mod flow;
pub mod geometry;
pub mod linalg;
pub mod propagate;
pub mod study;

pub use error::{LabError, Result};
