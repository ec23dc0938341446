//! Speaker adaptation through user-dependent padding.
//!
//! A recognizer is pretrained once with zero padding. Each new speaker is then
//! enrolled by learning only the values that fill the border rings of its
//! convolution layers, leaving every pretrained weight untouched.

pub mod adapt;
pub mod cluster;
pub mod error;
pub mod exec;
pub mod experiments;
pub mod gradcheck;
pub mod losses;
pub mod model;
pub mod padding;
pub mod synthdata;
pub mod tensor;

pub use error::{Error, Result};
pub use exec::Exec;
pub use tensor::{DType, Graph, Tensor, Var};
