//! Dense `f64` tensors, reverse-mode differentiation, MLP layers, Adam and a binary
//! checkpoint container.

mod adam;
pub mod checkpoint;
mod mlp;
mod params;
mod tape;
mod tensor;

pub use adam::{AdamConfig, OptimizerState};
pub use mlp::MlpArch;
pub use params::{FlatGrad, Layout, LayoutEntry, ParamSet};
pub use tape::{clamped_log_sigmoid, sigmoid, Activation, Tape, Var, PROB_CLAMP};
pub use tensor::Tensor;
