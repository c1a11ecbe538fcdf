//! Dense tensors with reverse-mode automatic differentiation.

mod conv;
mod elementwise;
pub mod gradcheck;
mod kernels;
mod linalg;
mod loss;
mod norm;
pub mod optim;
mod params;
mod tape;
mod temporal;
mod tensor;

pub use conv::conv_out_len;
pub use gradcheck::{grad_check, grad_check_tensor, GradCheckConfig, GradCheckReport};
pub use norm::BatchStats;
pub use optim::{adam_step, sgd_step, AdamConfig, AdamState};
pub use params::{Gradients, ParamEntry, ParamStore};
pub use tape::{BufferUpdate, Mode, Tape, Var};
pub use tensor::{numel, Scalar, Tensor};
