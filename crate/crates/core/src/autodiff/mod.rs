//! Matrix-level reverse-mode differentiation.
//!
//! The tape records eager matrix ops and runs a single reverse sweep. Because
//! the tape is generic over [`Scalar`], the same code evaluated on [`Dual`]
//! numbers produces exact Hessian-vector products (forward-over-reverse),
//! which is all the bilevel meta-gradient needs from second-order calculus.

mod mat;
mod scalar;
mod tape;

pub use mat::{Mat, Matrix};
pub use scalar::{Dual, Scalar};
pub use tape::{Tape, Var};
