//! Dense `f64` tensors, a reverse-mode tape, and a finite-difference checker.

mod gradcheck;
mod graph;
mod params;
mod tensor;

pub use gradcheck::{finite_diff_check, finite_diff_check_at};
pub use graph::{Gradients, Graph, Var, MASK_SENTINEL};
#[allow(unused_imports)]
pub(crate) use graph::{logsumexp, sigmoid};
pub use params::{ParamId, ParamStore};
pub use tensor::Tensor;
