//! Dense `f64` tensors and a tape-based reverse-mode differentiator.
//!
//! Values live in [`Tensor`]; differentiable computations are recorded on a
//! [`Tape`] and referenced through [`Var`] handles. Trainable inputs enter
//! the tape as leaves, the forward pass evaluates eagerly, and
//! [`Tape::backward`] fills leaf gradients in one reverse sweep.
//!
//! ```
//! use trajformer_autodiff::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(Tensor::scalar(3.0));
//! let y = tape.mul(x, x).unwrap();
//! tape.backward(y).unwrap();
//! assert_eq!(tape.grad(x).unwrap().data(), &[6.0]);
//! ```
//!
//! A tape and its handles belong to one thread of execution; independent
//! tapes can run in parallel.

mod error;
pub mod gradcheck;
mod kernel;
mod tape;
mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{check_gradients, GradCheckConfig, GradCheckReport};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
