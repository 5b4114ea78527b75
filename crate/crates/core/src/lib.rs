//! Unsupervised correlation-bias mitigation for sentiment classifiers.
//!
//! A shared text encoder is trained to classify anger while an adversarial
//! step teaches it to *unlearn* an unsupervised topic signal. The crate
//! bundles everything needed to run that experiment at desk scale:
//!
//! - [`corpus`]: sentence records, JSONL I/O, splitting and label balancing
//! - [`topics`]: a k-means topic model with a best-topic / miscellaneous score
//! - [`sampler`]: Wilson-bound weighted construction of the topic dataset
//! - [`net`]: embedding encoder (optional GRU), dense heads, exact gradients
//! - [`adversarial`]: the three-step sentiment / topic / anti-topic loop
//! - [`eval`]: F1, bias accuracy, masking, epoch averaging, leakage probe
//! - [`synthgen`]: synthetic corpora with injected topic/anger correlation

pub mod adversarial;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod net;
pub mod pipeline;
pub mod rng;
pub mod sampler;
pub mod synthgen;
pub mod topics;

pub use error::{Error, Result};
