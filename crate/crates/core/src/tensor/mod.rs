//! Dense matrices and a reverse-mode differentiation tape.
//!
//! [`Matrix`] holds plain row-major data and implements every forward kernel.
//! [`Tape`] records the same kernels as graph nodes so that a scalar loss can
//! be differentiated with respect to parameter leaves. Detached nodes
//! (constants, or `row_l2_normalize(.., true)`) are forward-only: nothing
//! upstream of them receives gradient through that path.
//!
//! The teacher network and the metrics evaluate through [`Matrix`] directly,
//! so they never allocate tape nodes.

mod matrix;
mod tape;

pub use matrix::{argmax, Matrix, Precision, Real};
pub use tape::{cross_entropy_value, Tape, Var, LOG_CLAMP};
