//! Dense `f64` tensors with reverse-mode automatic differentiation.

mod array;
pub mod conv;
pub mod gradcheck;
mod graph;

pub use array::Tensor;
pub use conv::ConvGeom;
pub use gradcheck::{finite_diff_check, Coords, GradCheckReport};
pub use graph::{BatchStats, Gradients, Graph, Var};

