#![no_std]
// `!(x > 0.0)` style guards are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
//! Attention and low-rank factor models, their regularized risks, and the
//! tools for checking confinement and dissipation of Langevin dynamics on them.

extern crate alloc;

pub mod attention;
pub mod darcy;
pub mod error;
pub mod linalg;
pub mod lora;
pub mod probe;
pub mod regularizers;
pub mod sde;

pub use error::{Error, Result};
