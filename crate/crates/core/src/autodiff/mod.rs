//! Minimal reverse-mode differentiation over dense row-major tensors.
//!
//! Forward ops are methods on [`Tape`]; each appends one node holding its
//! output value plus whatever the backward rule needs. [`Tape::backward`]
//! walks the nodes in exact reverse order of execution.

mod ops;
mod tape;
mod tensor;

pub use ops::{BatchNormMode, BatchStats, RunningStats, BN_EPSILON, BN_MOMENTUM, PROB_FLOOR};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

/// Whether stochastic and batch-statistics layers run in training or
/// inference behaviour.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Deliberate defects in backward rules, used as mutation fixtures to show
/// that the gradient checks catch real bugs. Per thread; off by default.
#[doc(hidden)]
pub mod fault {
    use std::cell::Cell;

    thread_local! {
        static CONV_KERNEL_SIGN: Cell<bool> = const { Cell::new(false) };
    }

    /// Flips the sign of the conv1d kernel gradient on this thread.
    pub fn set_conv_kernel_sign_flip(on: bool) {
        CONV_KERNEL_SIGN.with(|c| c.set(on));
    }

    pub(crate) fn conv_kernel_sign_flipped() -> bool {
        CONV_KERNEL_SIGN.with(Cell::get)
    }
}
