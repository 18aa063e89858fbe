//! Manifold-residual fingerprints for generative samplers.
//!
//! The pipeline, end to end: embed samples into a feature space, estimate
//! the data manifold as the reference set itself, project each generated
//! sample onto its exact nearest reference point, and keep the residual
//! (the artifact). The artifact set is a sampler's fingerprint; it feeds
//! attribution models and distribution-level metrics.
//!
//! Modules follow the pipeline order:
//! - [`embedding`]: pixel and frequency embeddings, standardization
//! - [`fpte`]: the binary tensor interchange format plus manifests
//! - [`index`]: exact nearest-neighbor projection against the reference set
//! - [`fingerprint`]: artifacts, fingerprints, and their summaries
//! - [`attribution`]: dataset splits and the attribution classifier
//! - [`metrics`]: distributional distances, clustering, and agreement scores
//! - [`synth`]: synthetic manifolds and perturbed samplers for end-to-end
//!   evaluation

pub mod attribution;
pub mod embedding;
pub mod error;
pub mod fingerprint;
pub mod fpte;
pub mod index;
pub mod matrix;
pub mod metrics;
pub mod stream;
pub mod synth;

pub use error::{Error, Result};
