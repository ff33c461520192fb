//! Dense tensors, reverse-mode gradients and FLOP instrumentation.

mod flops;
mod graph;
pub mod gradcheck;
mod params;
mod rng;
mod scalar;
mod tensor;

pub use flops::{FlopCounter, OpKind};
pub use gradcheck::{check_params, finite_difference_check, GradCheck, GradCheckReport};
pub use graph::{Gradients, Graph, Var};
pub use params::{ParamEntry, ParamId, ParamSet};
pub use rng::RngState;
pub use scalar::Scalar;
pub use tensor::Tensor;
