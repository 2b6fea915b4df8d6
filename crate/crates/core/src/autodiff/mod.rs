//! Reverse-mode differentiation over dense 2-D tensors, plus Adam.

mod adam;
pub mod checkpoint;
pub mod gradcheck;
mod params;
mod tape;

pub use adam::{clip_global_norm, AdamConfig, AdamState};
pub use gradcheck::{grad_check, grad_check_store, grad_check_store_with_step, grad_check_with, relative_error};
pub use params::{glob_match, Param, ParamId, ParamStore};
pub use tape::{sigmoid, Gradients, Tape, Var, ROW_NORM_EPS};
