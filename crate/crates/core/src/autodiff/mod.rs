//! Reverse-mode differentiation over dense `f64` arrays.

mod array;
mod scalar;
mod tape;

pub use array::Array;
pub use scalar::Scalar;
pub use tape::{Gradients, Prim, Tape, Var};

#[cfg(test)]
mod tests;
