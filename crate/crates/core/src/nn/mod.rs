//! Minimal differentiable-programming toolkit: matrices, a gradient tape,
//! parameter storage, Adam and the handful of layer types the model needs.

mod graph;
mod layers;
mod optim;
mod params;
mod tensor;

#[cfg(test)]
mod gradcheck;

pub use graph::{gelu, sigmoid, Gradients, Graph, RowSpan, SeqLayout, Var};
pub use layers::{BiLstm, Conv1d, Linear, Norm};
pub use optim::Adam;
pub use params::{normal, uniform, xavier, ParamId, ParamStore};
pub use tensor::Tensor;
