//! Desk-scale fine-tuning lab: a tiny RoPE decoder, a low-frequency Q/K
//! adapter, gradient-norm layer scheduling, and the oracles that check them.

pub mod analysis;
pub mod dls;
pub mod error;
pub mod model;
pub mod roae;
pub mod tensor;
pub mod train;

pub use error::{CheckpointError, Error, Result};
