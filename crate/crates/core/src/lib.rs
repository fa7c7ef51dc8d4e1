// Negated comparisons are used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod eval;
pub mod extract;
pub mod geometry;
pub mod keypoint_io;
pub mod localize;
pub mod map;
pub mod net;
pub mod pyramid;

pub use error::{Error, Result};
