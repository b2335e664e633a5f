//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Tape`] records every operation as it runs; [`Tape::backward`] then
//! sweeps the record in reverse. Build a fresh tape for every training
//! step. Broadcasting is limited to bias-add ([`Var::add_row`]).

mod params;
mod tape;
mod tensor;

pub use params::{Checkpoint, ParamId, ParamStore};
pub use tape::{concat, gelu, Gradients, Tape, Var};
pub use tensor::Tensor;
