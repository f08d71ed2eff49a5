//! Minimal dense-tensor numerical core: row-major tensors, a reverse-mode
//! autodiff tape with the layers a small Transformer or GRU needs, Adam, a
//! finite-difference gradient checker and a flat checkpoint format.

pub mod checkpoint;
pub mod error;
pub mod functional;
pub mod gradcheck;
pub mod optim;
pub mod params;
pub mod scalar;
pub mod tape;
pub mod tensor;

pub use error::{NnError, Result};
pub use gradcheck::{grad_check, grad_check_store, GradCheckReport};
pub use optim::{adam_step, Adam, AdamConfig, AdamMoments};
pub use params::{normal, uniform_fan_in, ParamId, ParamStore};
pub use scalar::Scalar;
pub use tape::{Axis, CustomOp, Gradients, Tape, Var};
pub use tensor::Tensor;
