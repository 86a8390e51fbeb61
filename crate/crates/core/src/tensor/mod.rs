//! Dense f32 tensors, reverse-mode autodiff, and the optimizer machinery.

pub mod autograd;
pub mod checkpoint;
pub mod kernels;
pub mod optim;
pub mod param;
#[allow(clippy::module_inception)]
mod tensor;

pub use autograd::{Gradients, Graph, Var};
pub use kernels::{
    attention, attention_multihead, cross_entropy, gelu, layer_norm, matmul, softmax_rows,
};
pub use optim::{clip_global_norm, AdamW, CosineSchedule};
pub use param::{Module, Parameter};
pub use tensor::{argmax, Tensor};
