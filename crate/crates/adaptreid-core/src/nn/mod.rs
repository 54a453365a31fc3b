//! Minimal f64 tensor engine: dense tensors, an autodiff tape, the layer
//! vocabulary the models need, and Adam.

pub mod adam;
pub mod conv;
pub mod init;
pub mod layers;
pub mod params;
pub mod tape;
pub mod tensor;

pub use adam::Adam;
pub use params::{ParamGroup, ParamId, ParamStore};
pub use tape::{softmax_rows, Gradients, NodeId, Tape};
pub use tensor::Tensor;
