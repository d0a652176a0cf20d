//! Black-box memorization probing.
//!
//! High-surprisal tokens of a document are found with a low-capacity
//! reference model, optionally screened by knowledge-filter models, masked one
//! at a time, and sent to a target model as cloze probes. A document counts as
//! memorized when enough masked tokens are reconstructed exactly.

pub mod baselines;
pub mod corpus;
pub mod lm;
pub mod pipeline;
pub mod probe;
pub mod scoring;
pub mod selector;
pub mod synth;
pub mod target;
#[cfg(feature = "test-support")]
pub mod testing;
