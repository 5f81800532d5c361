//! Sliding-window dynamic functional connectivity, a per-channel
//! scaled dot-product attention layer with residual reconstruction, and the
//! convolutional-recurrent classifier built around it, together with the
//! reverse-mode tensor engine that trains it and the cross-validation harness
//! that evaluates it.

pub mod dfcn;
pub mod error;
pub mod experiment;
mod io;
pub mod model;
pub mod tensor;

pub use error::{Error, ErrorKind, Result};
