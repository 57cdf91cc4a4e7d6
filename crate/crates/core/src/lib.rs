//! Few-shot segmentation by iterative refinement of a similarity prior.
//!
//! A frozen backbone supplies mid- and high-level features for a support and
//! a query image. High-level cosine similarity gives a training-free prior
//! over the query; a small fusion network refines that prior over several
//! steps, conditioned on the masked support and query mid-level features.

pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod episodes;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod fusion;
pub mod graph;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod pretrain;
pub mod prior;
pub mod refine;
pub mod rng;
pub mod tensor;
pub mod training;

pub use backbone::{Backbone, BackboneConfig, FeatureMap, Level};
pub use episodes::{Dataset, Episode, Mask, Sample, SplitPlan};
pub use error::{Error, Result};
pub use fusion::{FusionConfig, FusionNet, Logits};
pub use prior::{generate_prior, ProbKind, ProbMap};
pub use refine::{run_cascade, CascadeConfig, CascadeTrace, PriorMode, WeightMode};
pub use tensor::Tensor;

use sha2::{Digest, Sha256};

/// First 16 hex digits of the SHA-256 of `bytes`.
pub fn fingerprint(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}
