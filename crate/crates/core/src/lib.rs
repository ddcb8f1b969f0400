//! Nonlocal functionals of BBM type on finite metric measure spaces.
//!
//! Spaces are finitely many weighted atoms with a metric. On top of them the
//! crate evaluates the functional `F(δ)` for a family of mollifiers, audits
//! mollifier admissibility, estimates Cheeger-type energies and regularity
//! constants, and drives configuration-based experiments from the command
//! line.

// NaN-rejecting guards are written as `!(x > 0.0)` on purpose.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod approx;
pub mod bbm;
pub mod cli;
pub mod config;
pub mod energy;
pub mod error;
pub mod expr;
pub mod golden;
pub mod mollifier;
pub mod regularity;
pub mod space;

pub use error::{BbmError, Result};
