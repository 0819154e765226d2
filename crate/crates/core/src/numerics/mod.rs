//! Dense tensors, row-wise kernels, tape autodiff, seeded RNG, parameter
//! storage and the checkpoint container.

pub mod checkpoint;
pub mod graph;
pub mod kernels;
pub mod params;
pub mod rng;
pub mod tensor;

pub use graph::{Gradients, Graph, Var};
pub use kernels::BoolMatrix;
pub use params::{ParamId, ParamStore};
pub use rng::{Purpose, Rng};
pub use tensor::{Scalar, Tensor};
