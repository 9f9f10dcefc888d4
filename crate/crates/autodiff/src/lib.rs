//! Reverse-mode automatic differentiation over small dense `f64` tensors.
//!
//! The engine records operations on a [`Tape`] as they are evaluated and
//! computes gradients of a scalar root with [`Tape::backward`]. It supports
//! exactly the operations needed to train small fully connected networks:
//! matrix products, bias adds, elementwise arithmetic and activations, row
//! softmax, reductions, column gathers, Gumbel-noise injection and
//! straight-through estimation.
//!
//! ```
//! use catebounds_autodiff::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.param("x", Tensor::scalar(3.0)).unwrap();
//! let y = tape.mul(x, x).unwrap();
//! let grads = tape.backward(y).unwrap();
//! assert_eq!(grads.get(x).unwrap().item(), 6.0);
//! ```

mod error;
mod finite_diff;
mod op_check;
mod tape;
mod tensor;

pub use error::AutodiffError;
pub use finite_diff::finite_diff_check;
pub use op_check::{op_gradient_error, OP_CHECK_STEP};
pub use tape::{Gradients, OpKind, Tape, Var};
pub use tensor::Tensor;
