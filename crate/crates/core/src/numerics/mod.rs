//! Dense tensors with reverse-mode differentiation, parameter storage, and
//! finite-difference gradient verification.

mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, grad_check_params, GradReport};
pub use params::{name_hash, stream_rng, Ctx, Param, ParamId, ParamStore};
pub use tape::{Grads, Tape, Var};
pub use tensor::{broadcast_shape, Tensor};
