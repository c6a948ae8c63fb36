//! Reverse-mode differentiation over dense `f64` matrices.
//!
//! ```
//! use ultradp_autodiff::{Tape, Tensor};
//!
//! let tape = Tape::new();
//! let x = tape.param(Tensor::scalar(3.0));
//! let y = tape.square(x);
//! let grads = tape.backward(y).unwrap();
//! assert_eq!(grads.get(x).unwrap().item().unwrap(), 6.0);
//! ```

mod error;
mod gradcheck;
mod tape;
mod tensor;

pub use error::{AutodiffError, Result};
pub use gradcheck::{grad_check, ABS_FLOOR, DEFAULT_STEP};
pub use tape::{Axis, Gradients, Tape, Var};
pub use tensor::Tensor;
