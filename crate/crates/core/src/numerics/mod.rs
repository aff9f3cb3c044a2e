//! Dense `f64` arithmetic, the MLP embedding network and its optimizers.

pub mod model;
pub mod optim;
pub mod tensor;

pub use model::{backward, forward, Architecture, ForwardCache, ForwardOutput, GradientSet, Layer, ModelState};
pub use optim::{optimizer_update, OptimizerConfig, OptimizerKind, OptimizerState};
pub use tensor::{euclidean, l2_distance_matrix, DenseTensor};
