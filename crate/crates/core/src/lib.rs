//! Corpus categorization engine.
//!
//! The pipeline ingests an arXiv-style metadata dump, aligns it with
//! precomputed abstract embeddings, reduces them with PCA, discovers the
//! number of categories with a silhouette-scored K-Means sweep and reports
//! how the discovered clusters relate to the original subject labels.
//!
//! Every numeric kernel is deterministic: parallel sections (enabled by the
//! default `parallel` feature) only ever map independent rows, and all
//! reductions run in a fixed sequential order, so results are bit-identical
//! with or without threads.

pub mod cluster;
pub mod corpus;
pub mod embedstore;
pub mod error;
pub mod fixture;
pub mod metrics;
pub mod modelsel;
pub mod par;
pub mod pipeline;
pub mod project;
pub mod reduce;
pub mod report;

pub use error::{AtlasError, Result};
