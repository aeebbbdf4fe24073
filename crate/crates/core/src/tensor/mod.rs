//! Dense `f32` tensors with reverse-mode automatic differentiation.

mod backward;
mod container;
mod graph;
mod kernels;
mod optim;
mod value;


pub use backward::Gradients;
pub use container::{TensorFile, MAGIC as CONTAINER_MAGIC};
pub use graph::{Graph, Var, DISTANCE_EPS};
pub use optim::{cosine_lr, Param, ParamId, ParamStore, Sgd};
pub use value::Tensor;

pub mod gradcheck;
