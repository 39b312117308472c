// Negated comparisons are used deliberately so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod data;
pub mod dataset;
pub mod error;
pub mod inference;
pub mod io;
pub mod linalg;
pub mod net;
pub mod posterior;
pub mod predict;
pub mod protocol;
pub mod spectrum;
pub mod subspace;
pub mod train;
