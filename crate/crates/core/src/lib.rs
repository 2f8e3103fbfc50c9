//! Dynamic knowledge-graph engine.
//!
//! A coarse-to-fine pipeline over a mutable triplet store:
//!
//! ```text
//!               ┌──────────────┐   top-N seeds    ┌──────────────────┐
//!  query text ─►│ text embedder├─► ANN search ───►│ candidate facts  │
//!               └──────────────┘                  │ (1-hop subgraph) │
//!                                                 └───────┬──────────┘
//!                                                         │ featurize
//!               ┌──────────────┐   top-k facts    ┌───────▼──────────┐
//!  decoder ────►│ query state  ├─────────────────►│ sparse knowledge │
//!  (layer ℓ)    └──────────────┘                  │    attention     │
//!                                                 └───────┬──────────┘
//!               fused back into the decoder  ◄────────────┘  k_final
//! ```
//!
//! The store supports snapshot-isolated concurrent reads with sub-millisecond
//! single-fact commits; entity/relation embeddings are complex-valued with
//! rotational relation semantics and can be retrained asynchronously without
//! blocking queries.

pub mod attention;
pub mod benchx;
pub mod config;
pub mod data;
pub mod embed;
pub mod engine;
pub mod eval;
pub mod protocol;
pub mod service;
pub mod ids;
pub mod model;
pub mod retrieval;
pub mod store;
pub mod util;

pub use embed::{EmbedError, EmbedTrainConfig, EmbeddingStore};
pub use ids::{EntityId, FactId, RelationId, Triplet};
pub use store::{GraphSnapshot, KgStore, StoreError};
