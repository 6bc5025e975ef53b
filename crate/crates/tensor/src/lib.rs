//! Minimal dense-tensor math with reverse-mode differentiation and AdamW.
//!
//! The graph is rebuilt per training step: create a [`Tape`], bind leaves,
//! compose ops, call [`Tape::backward`], read gradients, drop the tape.

mod error;
mod gradcheck;
mod optim;
mod scalar;
mod tape;
mod tensor;

pub use error::TensorError;
pub use gradcheck::grad_check;
pub use optim::{adamw_step, Binder, LrSchedule, OptimizerConfig, ParamSet, Parameter};
pub use scalar::Scalar;
pub use tape::{Tape, Var, LAYER_NORM_EPS};
pub use tensor::{broadcast_shapes, Tensor};
