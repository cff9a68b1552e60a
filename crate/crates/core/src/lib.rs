//! Structured pruning and knowledge distillation for small decoder-only
//! transformers: activation-based importance, trimming, parameter-budget
//! architecture search and distillation retraining.

pub mod autodiff;
pub mod distill;
pub mod importance;
pub mod io;
pub mod kernels;
pub mod model;
pub mod pruner;
pub mod search;
pub mod tensor;

pub use autodiff::{Eager, Graph, Tape, Var};
pub use model::{CaptureSpec, Model, ModelConfig, TokenBatch};
pub use tensor::{Float, Tensor, TensorError};
