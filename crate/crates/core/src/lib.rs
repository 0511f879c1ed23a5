//! Learned binary hashing that transfers to classes with no labeled data.
//!
//! A shared two-stream MLP embeds a labeled source batch and an unlabeled
//! batch into one representation space. A coarse binary head mines the
//! unlabeled rows most likely to come from novel classes; a fine head
//! assigns those rows to specific novel classes using class-name word
//! vector similarities; a contrastive loss over the resulting pair labels
//! trains an l-bit hash head. Retrieval quality is measured with MAP over
//! the Hamming ranking and precision within a Hamming radius.

pub mod backbone;
pub mod coarse;
pub mod config;
pub mod diff;
pub mod error;
pub mod fine;
pub mod hash;
pub mod params;
pub mod pipeline;
pub mod retrieval;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
pub use params::ParamStore;
pub use tensor::Tensor2;
