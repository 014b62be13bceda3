//! Minimal reverse-mode automatic differentiation over dense `f64` tensors,
//! with Adam and Nesterov-momentum SGD.

mod params;
mod tape;
mod tensor;

pub use params::{relu_inplace, AdamConfig, Linear, ParamId, ParamStore, SgdConfig};
pub use tape::{softmax_rows, Grads, Tape, Var, ONE_MINUS_P_FLOOR};
pub use tensor::Tensor;
