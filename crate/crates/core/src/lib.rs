//! Sparse, mask-proportional generative video editing.
//!
//! A frozen toy latent diffusion transformer is steered by two trainable
//! adapters: a local context encoder that only ever sees tokens inside the
//! (dilated) edit mask, and a global context embedder that reads a fixed
//! low-resolution copy of the background. Per-step compute therefore scales
//! with the number of edited tokens, not with the video resolution.

pub mod error;
pub mod numeric;
pub mod io;
pub mod codec;
pub mod mask;
pub mod nn;
pub mod prompt;
pub mod backbone;
pub mod adapters;
pub mod diffusion;
pub mod flow;
pub mod training;
pub mod interactive;
pub mod perf;

#[cfg(test)]
pub(crate) mod testutil;

pub use error::{Error, Result};
pub use numeric::{FlopCounter, Graph, OpKind, ParamId, ParamSet, RngState, Scalar, Tensor, Var};
