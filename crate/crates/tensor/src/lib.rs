//! Minimal dense-tensor engine: tape-based reverse-mode autodiff over `f32`
//! arrays, the conv/pool/dense layer set used by the dispensing networks,
//! Adam, and the `DFW1` weight format.

mod adam;
mod error;
pub mod gradcheck;
mod graph;
mod kernels;
mod layers;
mod tensor;
mod weights;

pub use adam::AdamState;
pub use error::{Result, TensorError};
pub use graph::{CustomOp, Graph, Var};
pub use layers::{Activation, ForwardPass, LayerSpec, Param, Sequential};
pub use tensor::Tensor;
pub use weights::{load_weights, parse_weights, save_weights, MAGIC};
