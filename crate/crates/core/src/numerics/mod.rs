//! Dense tensors, the differentiation tape, parameters and the optimiser.

pub mod graph;
pub mod optim;
pub mod params;
pub mod tensor;

pub use graph::{Gradients, Graph, Var};
pub use optim::{AdamW, AdamWConfig};
pub use params::{Param, ParamId, ParamStore};
pub use tensor::{softmax_rows, softmax_rows_masked, Tensor};
