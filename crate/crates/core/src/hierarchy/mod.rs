//! Code taxonomy graph and hierarchy-aware code embeddings.

mod descriptor;
mod gnn;
mod graph;

pub use descriptor::{CodeSystemDescriptor, Level, LevelRule, Range, Syntax};
pub use gnn::{
    auc, lookup_hier, reconstruction_auc, train_hier_embeddings, GnnConfig, HierTraining, ReconstructionProblem,
    GNN_MODEL,
};
pub use graph::{EdgeKind, GraphOptions, HierGraph, DEFAULT_SIBLING_CAP};
