//! Width-independent approximate solver for positive (packing/covering)
//! semidefinite programs.
// `!(x > 0.0)` is used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod decision;
pub mod error;
pub mod expdot;
pub mod io;
pub mod linalg;
pub mod mmwu_check;
pub mod normalize;
pub mod optimizer;
pub mod par;
pub mod sequential;

pub use error::{PsdpError, Result};
