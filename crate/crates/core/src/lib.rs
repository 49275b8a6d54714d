//! Discrete quasi-variational sweeping process for granular pile growth:
//! gradient-bound constraints, forward solvers, adjoint-based control of the
//! supporting surface and a checker for the discrete optimality system.

// `!(x > 0.0)` is used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod constraint;
pub mod control;
pub mod dynamics;
pub mod error;
pub mod grid;
pub mod lsq;
pub mod optimality;

pub use error::{Error, Result};

/// Nodal values on a [`grid::Grid`].
pub type Field = nalgebra::DVector<f64>;
