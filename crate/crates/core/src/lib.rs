//! Few-shot metric learning: a Siamese contrastive encoder stacked under a
//! Matching Network classifier, with episodic evaluation and clustering
//! quality metrics.

pub mod autodiff;
pub mod cli;
pub mod datasets;
pub mod episodes;
pub mod error;
pub mod metrics;
pub mod models;
pub mod pipelines;
pub mod tensor;

pub use error::{Error, FormatError, ImageError, Result};
pub use tensor::{AnyTensor, DType, Element, Tensor};
