//! Conformal prediction with in-context learning.
//!
//! A linear self-attention (LSA) transformer is pre-trained on synthetic noisy
//! linear-regression prompts. At inference time the in-context predictions of
//! the model are used as conformity scores for full conformal prediction, which
//! needs one forward pass per candidate label instead of one refit. Exact
//! ridge-regression conformal predictors serve as oracles.
//!
//! Modules:
//!
//! - [`taskgen`]: synthetic tasks and prompt tokenization
//! - [`lsa`]: the LSA model, its gradients, Adam and FLOP accounting
//! - [`ridge`]: closed-form ridge regression
//! - [`conformal`]: full and split conformal prediction
//! - [`eval`]: coverage, Wasserstein, distribution-shift and timing harnesses
//! - [`scaling`]: compute scaling-law fit and compute-optimal allocation

// `!(x > 0.0)` style checks deliberately reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod conformal;
pub mod error;
pub mod eval;
pub mod lsa;
pub mod optim;
pub mod report;
pub mod ridge;
pub mod rng;
pub mod scaling;
pub mod stats;
pub mod taskgen;

pub use error::{Error, Result};
