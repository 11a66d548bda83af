//! Desk-scale streaming speech recognizer.
//!
//! The pipeline: a convolutional front-end reduces feature frames 4x, a
//! chunked self-attention encoder processes them with bounded future
//! context (optionally reusing cached states from earlier chunks), a
//! truncated-attention decoder consumes encoder outputs monotonically, and
//! beam search combines decoder, truncated-CTC and n-gram LM scores while
//! chunks are still arriving.
//!
//! Everything runs on a small f64 tape autodiff in [`tensor`]; the model is
//! deliberately tiny so the whole stack trains and decodes on a laptop CPU.

pub mod attention;
pub mod ctc;
pub mod decoder;
pub mod decoding;
pub mod encoder;
pub mod lm;
pub mod model;
pub mod mta;
pub mod tensor;
pub mod training;

pub use tensor::{Graph, Mask, Tensor, TensorError, Var};
