//! Dense self-supervised semantic-concentration laboratory: ranking-based
//! correspondence losses, Sinkhorn sharpening, object-aware prototype filtering,
//! a self-distillation trainer on a synthetic scene corpus and a numerical
//! harness for the accompanying embedding theory.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod align;
pub mod checks;
pub mod cli;
pub mod cotap;
pub mod error;
pub mod eval;
pub mod numeric;
pub mod oaf;
pub mod par;
pub mod sinkhorn;
pub mod synth;
pub mod theory;
pub mod trainer;

pub use error::{LabError, Result};
