//! Synthetic EHR generation with a hierarchy- and semantics-guided
//! decoder-only transformer.
//!
//! The pipeline, bottom to top:
//!
//! * [`corpus`]: patient records, table ingestion, phenotype labels, splits
//!   and a ground-truth Markov generator for desk-scale experiments.
//! * [`tokenizer`]: vocabulary and the record sequence grammar.
//! * [`hierarchy`]: taxonomy graph over codes and GNN embeddings trained by
//!   adjacency reconstruction.
//! * [`semantics`]: frozen description embeddings and the shared
//!   embedding-file format.
//! * [`model`], [`trainer`], [`sampler`]: the generator itself.
//! * [`evaluation`]: fidelity, privacy and utility metrics.

pub mod checkpoint;
pub mod corpus;
mod error;
pub mod evaluation;
pub mod hashing;
pub mod hierarchy;
pub mod model;
pub mod sampler;
pub mod semantics;
pub mod tokenizer;
pub mod trainer;

pub use error::{Error, Result};
