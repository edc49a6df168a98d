//! Minimal double-precision tensor algebra with a dynamic tape for
//! reverse-mode differentiation, an Adam optimizer and a flat checkpoint
//! format.
//!
//! Everything here is sized for small networks trained on a CPU: tensors are
//! dense row-major `f64` buffers, the graph is rebuilt on every forward pass
//! and matrix products go through a cache-blocked GEMM kernel.

mod checkpoint;
mod error;
mod graph;
pub mod init;
mod kernel;
mod optim;
mod params;
mod tensor;

pub use checkpoint::{load_checkpoint, save_checkpoint, Manifest, ManifestEntry};
pub use error::TensorError;
pub use graph::{Graph, NodeId};
pub use optim::{Adam, AdamConfig};
pub use params::{ParamNodes, Params};
pub use tensor::Tensor;

pub type Result<T, E = TensorError> = std::result::Result<T, E>;
