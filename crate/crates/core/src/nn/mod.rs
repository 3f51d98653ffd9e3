//! Small reverse-mode autodiff engine over NCHW `f32` tensors.

mod graph;
pub mod kernels;
mod layers;
mod optim;
mod params;
mod tensor;

pub use graph::{Gradients, Graph, NodeId, Trainable};
pub use kernels::ConvGeom;
pub use layers::{Conv2d, Linear};
pub use optim::Adam;
pub use params::{ParamId, ParamStore};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
