//! Minimal linear algebra with reverse-mode differentiation and Adam.

mod adam;
mod matrix;
pub mod special;
mod tape;

pub use adam::{AdamConfig, AdamState};
pub use matrix::{Csr, Matrix};
pub use tape::{sigmoid, softplus, Gradients, Tape, Var};

pub(crate) use matrix::gemm;
pub(crate) use tape::{dot, zinb_entry};
