//! Dense integer identifiers for graph objects.
//!
//! Ids are assigned sequentially from zero by the store writer and are never
//! reused, even after the object they name is tombstoned. They are plain
//! `u32` newtypes so they can be packed into slot arrays and wire messages
//! without indirection.

use serde::{Deserialize, Serialize};
use std::fmt;

macro_rules! id_type {
    ($(#[$doc:meta])* $name:ident, $tag:literal) => {
        $(#[$doc])*
        #[derive(
            Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
        )]
        #[serde(transparent)]
        pub struct $name(pub u32);

        impl $name {
            #[inline]
            pub fn index(self) -> usize {
                self.0 as usize
            }
        }

        impl fmt::Debug for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, concat!($tag, "{}"), self.0)
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, "{}", self.0)
            }
        }
    };
}

id_type!(
    /// Identifier of an entity (graph node).
    EntityId,
    "E"
);
id_type!(
    /// Identifier of a relation type (edge label).
    RelationId,
    "R"
);
id_type!(
    /// Identifier of a fact (directed labelled edge with a timestamp).
    FactId,
    "F"
);

/// A directed, timestamped edge `head --relation--> tail`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Triplet {
    pub head: EntityId,
    pub relation: RelationId,
    pub tail: EntityId,
    pub timestamp_ms: i64,
}

impl Triplet {
    /// The `(head, relation, tail)` key that must be unique among live facts.
    #[inline]
    pub fn key(&self) -> (u32, u32, u32) {
        (self.head.0, self.relation.0, self.tail.0)
    }
}
