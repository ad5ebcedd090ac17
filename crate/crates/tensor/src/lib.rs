//! Minimal CPU tensor engine: dense f32 tensors, a tape-based autodiff
//! [`Graph`], a handful of layers, and Adam.

mod error;
mod graph;
pub mod index;
mod kernels;
pub mod nn;
mod optim;
mod params;
mod tensor;

pub use error::{Result, TensorError};
pub use graph::{Gradients, Graph, Mode, Var};
pub use kernels::gemm;
pub use optim::{Adam, AdamConfig};
pub use params::{init_normal, init_uniform, Param, ParamId, ParamStore};
pub use tensor::{strides_of, Tensor};
