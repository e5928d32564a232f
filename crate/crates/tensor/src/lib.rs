//! Dense tensors with tape-based reverse-mode autodiff.

mod error;
mod gradcheck;
pub mod io;
mod optim;
mod scalar;
mod tape;
mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{grad_check, grad_check_tape, rel_error, GradCheckReport, REL_FLOOR};
pub use optim::{AdamConfig, AdamState, Decay, Schedule};
pub use scalar::Scalar;
pub use tape::{BnMode, BnStats, Gradients, Tape, Var, BN_EPS, LN_EPS};
pub use tensor::Tensor;
