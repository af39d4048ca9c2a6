//! Training-free composition of several low-rank adapters in a miniature
//! multi-modal rectified-flow transformer.
//!
//! The crate extracts one spatial prior per subject from cross-attention at the
//! last double-stream block, then substitutes the adapters' sublayer residuals
//! inside those regions during denoising.

pub mod blend;
pub mod error;
pub mod io;
pub mod lora;
pub mod mmdit;
pub mod oracle;
pub mod pipeline;
pub mod prior;
pub mod rng;
pub mod selftest;
pub mod tensor;

pub use error::{Error, Result};
