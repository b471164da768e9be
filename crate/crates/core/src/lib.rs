//! Continuous-token language modeling with a token-wise diffusion head.
//!
//! The crate covers the tokenization codec, masking schedules, a small
//! Transformer decoder, the diffusion head and sampler, training for the
//! NTP / MNTP / MAR tasks, sequence decoding and evaluation.

pub mod codec;
pub mod decode;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod masking;
pub mod model;
pub mod numerics;
pub mod trainer;

pub use error::{Error, Result};
