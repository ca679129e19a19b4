//! Minimal reverse-mode automatic differentiation and the AdamW update rule.

mod adamw;
mod tape;
mod tensor;

pub use adamw::{AdamWConfig, AdamWState};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
