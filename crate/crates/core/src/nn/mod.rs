//! Minimal reverse-mode differentiation for the layer set the encoders need.
//!
//! A [`Tape`] records one forward computation over parameters held in a
//! [`ParamStore`]; [`Tape::backward`] returns gradients for every recorded
//! node, and [`Gradients::accumulate_params`] folds the parameter leaves into
//! a [`Grads`] buffer that [`adam_step`] consumes.

mod adam;
mod gradcheck;
mod params;
mod tape;

pub use adam::{adam_step, AdamConfig};
pub use gradcheck::{grad_check, relative_error, GradCheckReport};
pub(crate) use params::truncated_normal;
pub use params::{AdamState, Grads, ParamId, ParamStore, Parameter};
pub use tape::{Fault, Gradients, Tape, Var};

use alloc::string::String;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum NnError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape { op: &'static str, lhs: (usize, usize), rhs: (usize, usize) },
    #[error("hidden size {dim} is not divisible by {heads} heads")]
    HeadsDoNotDivide { dim: usize, heads: usize },
    #[error("index {index} out of range for table with {rows} rows")]
    IndexOutOfRange { index: usize, rows: usize },
    #[error("attention row has no unmasked key")]
    NoUnmaskedKey,
    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),
    #[error("non-finite value: {0}")]
    NonFinite(&'static str),
}

/// Standard transformer building blocks on top of the tape.
pub mod layers {
    use super::{NnError, Tape, Var};
    use crate::real::Real;

    pub fn linear<T: Real>(tape: &mut Tape<'_, T>, x: Var, w: Var, b: Var) -> Result<Var, NnError> {
        let y = tape.matmul(x, w)?;
        tape.add_bias(y, b)
    }

    /// Two-layer GELU feed-forward block.
    pub fn feed_forward<T: Real>(tape: &mut Tape<'_, T>, x: Var, (w1, b1): (Var, Var), (w2, b2): (Var, Var)) -> Result<Var, NnError> {
        let h = linear(tape, x, w1, b1)?;
        let h = tape.gelu(h);
        let h = tape.dropout(h);
        linear(tape, h, w2, b2)
    }
}
