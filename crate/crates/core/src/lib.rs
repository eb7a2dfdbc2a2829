//! Speech dereverberation by mapping inter-frame STFT correlations to
//! per-bin multi-frame complex filters.

pub mod error;
pub mod features;
pub mod losses;
pub mod metrics;
pub mod filtering;
pub mod model;
pub mod pipeline;
pub mod signal;
pub mod synth;
pub mod tensor_stft;
pub mod training;

pub use error::{Error, Result};
