//! Coarse retrieval stage: dense text embeddings, nearest-neighbor search
//! over entity descriptions, and expansion of the top entities into a
//! candidate subgraph of facts.
//!
//! The flow mirrors the engine's query path:
//!
//! ```text
//!   query text ──embed_text──► q_dense ──ann_search──► top-N seed entities
//!                                                          │
//!                                        build_candidate_subgraph (1 hop)
//!                                                          ▼
//!                                          CandidateSubgraph (≤ M facts)
//! ```
//!
//! Text is embedded by deterministic feature hashing rather than a learned
//! encoder: reproducibility needs no weights, and everything downstream
//! (selection, fusion, losses) only assumes *some* fixed dense space. The
//! embedder sits behind this module boundary so a learned one can be
//! swapped in.

mod ann;
mod subgraph;
mod textembed;

pub use ann::{AnnIndex, AnnMode, AnnParams};
pub use subgraph::{build_candidate_subgraph, CandidateSubgraph, DEFAULT_MAX_CANDIDATES};
pub use textembed::{embed_text, DEFAULT_TEXT_DIM};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum RetrievalError {
    /// Text embedding requires at least one character.
    #[error("cannot embed empty text")]
    EmptyText,
    /// Vectors from differently-sized spaces cannot be compared.
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    /// Search over an index with no entries.
    #[error("index is empty")]
    EmptyIndex,
    /// Incremental insert of an entity that is already present.
    #[error("entity {0:?} is already indexed")]
    AlreadyIndexed(crate::ids::EntityId),
    /// Subgraph expansion from a seed the snapshot does not contain.
    #[error("unknown entity {0:?}")]
    UnknownEntity(crate::ids::EntityId),
}

/// A unit-length embedding of a piece of text, together with a hash of the
/// text it came from (useful for cache keys and provenance checks).
#[derive(Debug, Clone, PartialEq)]
pub struct DenseTextEmbedding {
    pub vector: Vec<f64>,
    pub source_text_hash: u64,
}

impl DenseTextEmbedding {
    pub fn dim(&self) -> usize {
        self.vector.len()
    }
}

/// Cosine similarity between two embeddings. Because both vectors carry the
/// unit-norm invariant this is a plain dot product, exactly in [−1, 1] up to
/// rounding.
pub fn coarse_score(
    query: &DenseTextEmbedding,
    entity: &DenseTextEmbedding,
) -> Result<f64, RetrievalError> {
    if query.dim() != entity.dim() {
        return Err(RetrievalError::DimensionMismatch {
            expected: query.dim(),
            got: entity.dim(),
        });
    }
    Ok(dot(&query.vector, &entity.vector))
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
