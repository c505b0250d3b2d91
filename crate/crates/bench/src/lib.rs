//! Synthetic tasks, experiment drivers and report writing.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod distill;
pub mod experiment;
pub mod error;
pub mod color;
pub mod frequency;
pub mod negation;
pub mod report;

pub use error::{BenchError, Result};
