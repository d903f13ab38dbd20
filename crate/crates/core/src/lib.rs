//! Train a small decoder-only transformer, fit per-layer top-k sparse
//! autoencoders on its residual stream, and audit the sparse latents
//! against a multi-hot concept probing set.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod activations;
pub mod audit;
pub mod autograd;
pub mod corpus;
pub mod error;
pub mod gpt;
pub mod gradcheck;
pub mod io;
pub mod lm_train;
pub mod optim;
pub mod sae;
pub mod tensor;
pub mod tokenizer;

pub use autograd::{Graph, Var};
pub use error::{Error, Result};
pub use gpt::{GptConfig, GptModel};
pub use sae::{SaeConfig, SaeModel};
pub use tensor::{Scalar, Tensor};
