//! Dense tensors, reverse-mode differentiation, random streams, clustering.

pub mod autodiff;
pub mod gradcheck;
pub mod kmeans;
pub mod rng;
pub mod tensor;

pub use autodiff::{Bindings, Gradients, Graph, Var};
pub use rng::RngStream;
pub use tensor::{ParameterSet, Tensor};
