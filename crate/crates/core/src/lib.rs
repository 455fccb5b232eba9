//! Desk-scale speech sequence-to-sequence toolkit.
//!
//! The crate is organized bottom-up:
//!
//! * [`tensor`]: 64-bit tensors, a reverse-mode autodiff graph and
//!   finite-difference gradient checks.
//! * [`attention`]: scaled dot-product and multi-head attention, causal
//!   masks and sinusoidal positional encodings.
//! * [`models`]: the encoder/decoder factorization with Transformer and
//!   RNN bodies plus ASR/ST and TTS task heads.
//! * [`losses`]: cross-entropy, CTC, the joint ASR objective and the TTS
//!   composite loss.
//! * [`decoding`]: joint CTC/attention beam search with LM fusion, greedy
//!   decoding and autoregressive TTS inference.
//! * [`training`]: optimizers, the Noam schedule, gradient accumulation,
//!   checkpoints and the training loop.
//! * [`harness`]: synthetic datasets, file formats, metrics and config.

pub mod attention;
pub mod data;
pub mod decoding;
pub mod error;
pub mod harness;
pub mod losses;
pub mod models;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
