//! Minimal reverse-mode differentiation over dense `f64` tensors.
//!
//! Only the ops the model needs are provided: convolutions (dense,
//! depthwise, occupancy-masked), projections, attention primitives,
//! normalization, activations, resampling, and fused detection losses.

mod graph;
pub mod gradcheck;
pub mod ops;
mod params;

pub use gradcheck::{grad_check, grad_check_fn};
pub use graph::{Gradients, Graph, Node, NodeId};
pub use ops::{OpKind, ScatterPlan, WarpPlan};
pub use params::{sgd_step, Adam, ParamStore};
