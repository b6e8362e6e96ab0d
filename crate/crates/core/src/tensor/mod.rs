//! Dense tensors and the autodiff tape built on them.

mod dense;
mod gradcheck;
mod tape;

pub use dense::{patchify, unpatchify, Tensor};
pub use gradcheck::{grad_check, grad_check_many, relative_error};
pub use tape::{Tape, Var};
