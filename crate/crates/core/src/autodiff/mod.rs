//! Minimal reverse-mode differentiation over dense f64 tensors.

mod adam;
pub mod gradcheck;
mod graph;
mod params;
mod tensor;

pub use adam::{Adam, AdamConfig};
pub use gradcheck::{check_gradients, GradCheckReport};
pub use graph::{Graph, Var};
pub use params::{ParamStore, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use tensor::Tensor;
