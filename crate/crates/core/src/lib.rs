//! Global explanations for image classifiers by optimizing text prompts that
//! condition a frozen few-step generator, plus automated discovery of
//! core/spurious classifier features from segmented explanation images.

pub mod autodiff;
pub mod discovery;
pub mod error;
pub mod hard;
pub mod objective;
pub mod optimizer;
pub mod pipeline;
pub mod prompt;
pub mod sampler;
pub mod segment;
pub mod toy;

pub use error::{Error, Result};
