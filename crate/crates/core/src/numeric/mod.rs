//! Dense arrays, spatial kernels and reverse-mode gradients.

mod array;
pub mod graph;
pub mod kernels;

pub use array::{Element, NdArray};
pub use graph::{Gradients, Graph, Var};
pub use kernels::{avg_pool2d, bilinear_resize, conv2d, instance_norm, quantile};
