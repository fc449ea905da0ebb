//! Dense-tensor reverse-mode automatic differentiation with the layers and
//! optimizer the models train with.

pub mod check;
pub mod checkpoint;
mod graph;
pub mod init;
pub mod layers;
mod optim;
mod params;
mod tensor;

pub use graph::{Graph, Var};
pub use optim::Adam;
pub use params::{ParamId, ParamStore, Parameter};
pub use tensor::Tensor;
