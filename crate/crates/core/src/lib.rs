//! Wasserstein contrastive representation distillation.
//!
//! The crate distills small teacher networks into students using two
//! complementary feature-level losses on top of the usual cross-entropy:
//! a dual-form critic loss over congruent/incongruent pairs and a primal-form
//! entropic optimal-transport loss within each mini-batch.

pub mod buffer;
pub mod cli;
pub mod critic;
pub mod data;
pub mod engine;
pub mod error;
pub mod nets;
pub mod ot;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{finite_difference_grad, softmax_rows, Elementwise, Gradients, Tape, Tensor, Var};
