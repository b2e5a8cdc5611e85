//! Numerical building blocks: an autodiff tape for the trainable head,
//! forward-only layers for the frozen extractors, parameters and optimizer.

pub mod graph;
pub mod infer;
pub mod layers;
pub mod optim;
pub mod params;

pub use graph::{Gradients, Graph, Tensor, Var};
pub use params::{BoundParams, ParamStore, StoredTensor};
