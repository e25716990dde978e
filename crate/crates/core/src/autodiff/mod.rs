//! Dense `f64` tensors, a reverse-mode tape, and the Adam optimizer.

mod adam;
mod params;
mod tape;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use params::{xavier_uniform, ModelParams};
pub use tape::{log_softmax, sigmoid, NamedGrads, OpKind, OpRecord, Tape, Var};
pub use tensor::Tensor;
