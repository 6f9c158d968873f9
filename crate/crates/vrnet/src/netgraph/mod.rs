//! Minimal reverse-mode automatic differentiation: dense tensors, a
//! define-by-run graph with the layer set the surrogate needs (periodic
//! convolutions, batch normalization, the differentiable renderer, small
//! matrix algebra for the spectral head), the AdamW optimizer and a
//! reduce-on-plateau scheduler.

mod conv;
mod graph;
mod optim;
mod tensor;

pub use graph::{BnState, Graph, NodeId, RenderTables, SELU_ALPHA, SELU_LAMBDA};

pub use optim::{fan_in_init, AdamW, LrSchedule, ParamStore, Parameter};
pub use tensor::Tensor;
