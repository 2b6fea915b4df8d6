pub mod autodiff;
pub mod cas;
pub mod cell;
pub mod controller;
pub mod regularizers;
pub mod error;
pub mod gradsuite;
pub mod mas;
pub mod models;
pub mod rng;
pub mod search;
pub mod tasks;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
