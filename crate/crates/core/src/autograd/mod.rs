//! Minimal reverse-mode differentiation over 2-D tensors.

mod graph;
pub mod gradcheck;
mod params;
mod scalar;

pub use graph::{softmax_rows_inplace, Aggregation, Gradients, Graph, Var};
pub use params::{trunc_normal, LrGroup, ParamId, ParamInfo, ParamStore};
pub use scalar::Real;
