//! Minimal reverse-mode automatic differentiation over dense `NCHW` tensors,
//! with the convolution, normalisation and pooling layers needed by the
//! synthesis and segmentation networks of `htc-core`.
//!
//! Everything runs single-threaded and is bit-for-bit deterministic for a
//! given sequence of operations.

mod adam;
mod graph;
mod kernels;
pub mod layers;
mod params;
mod scalar;
mod tensor;

pub use adam::Adam;
pub use graph::{concat_channels, lerp_scalar, Gradients, Graph, Var};
pub use params::ParamStore;
pub use scalar::Float;
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum NnError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("no parameter named {0}")]
    MissingParam(String),
}
