//! Dense tensors, reverse-mode differentiation and the Adam optimizer.
//!
//! Only the operations the denoiser and surrogate networks need are provided.
//! Storage precision is a type parameter: networks train in `f32` while
//! gradient checks run the same code in `f64`. Reductions always accumulate
//! in `f64`.

mod adam;
mod checkpoint;
mod graph;
mod params;
mod real;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use checkpoint::{Checkpoint, NamedTensor};
pub use graph::{Gradients, Graph, Var};
pub use params::{Ema, ParamStore};
pub use real::{gemm, Real};
pub use tensor::Tensor;
