//! Expansion of coarse-retrieval seeds into the candidate fact set the
//! attention stage scores.
//!
//! Every seed contributes its incident live facts (one hop by default; a
//! depth knob exists). A fact reachable from several seeds appears once and
//! is attributed to its highest-scoring seed. The final ordering —
//! descending provenance score, ascending fact id — makes truncation at the
//! M cap keep the facts the coarse stage was most confident about.

use super::RetrievalError;
use crate::ids::{EntityId, FactId};
use crate::store::GraphSnapshot;
use std::collections::HashMap;

/// Hard ceiling on candidate facts handed to attention, protecting the fine
/// stage from hub entities. Config knob; this is the default.
pub const DEFAULT_MAX_CANDIDATES: usize = 4096;

#[derive(Debug, Clone)]
pub struct CandidateSubgraph {
    /// Retrieval seeds, sorted by descending coarse score then ascending id.
    pub seed_entities: Vec<(EntityId, f64)>,
    /// Deduplicated candidate facts; the attention stage's M = facts.len().
    pub facts: Vec<FactId>,
    /// Which seed claimed each fact (the highest-scoring incident seed).
    pub provenance: HashMap<FactId, EntityId>,
}

impl CandidateSubgraph {
    pub fn candidate_count(&self) -> usize {
        self.facts.len()
    }
}

/// Expand `seeds` into a candidate subgraph over `snapshot`.
///
/// `hops` ≥ 1 controls expansion depth: at depth 2 the endpoints of hop-1
/// facts contribute their incident facts too, still attributed to the
/// originating seed. `max_candidates` truncates the ordered fact list.
pub fn build_candidate_subgraph(
    snapshot: &GraphSnapshot,
    seeds: &[(EntityId, f64)],
    hops: usize,
    max_candidates: usize,
) -> Result<CandidateSubgraph, RetrievalError> {
    assert!(hops >= 1, "expansion depth must be at least 1");
    assert!(max_candidates >= 1, "candidate cap must be at least 1");
    assert!(!seeds.is_empty(), "at least one seed is required");
    for &(id, _) in seeds {
        if snapshot.entity(id).is_none() {
            return Err(RetrievalError::UnknownEntity(id));
        }
    }

    let mut seed_entities = seeds.to_vec();
    seed_entities.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0 .0.cmp(&b.0 .0)));

    // Highest-scoring seed claims each fact; processing seeds in sorted
    // order makes that the first claim.
    let mut provenance: HashMap<FactId, EntityId> = HashMap::new();
    let mut ordered: Vec<(f64, FactId)> = Vec::new();
    for &(seed, score) in &seed_entities {
        // Per-seed breadth-first walk; a fact already claimed by an earlier
        // (higher-scoring) seed is still traversed, just not re-claimed.
        let mut frontier = vec![seed];
        let mut seen_entities: std::collections::HashSet<EntityId> =
            frontier.iter().copied().collect();
        let mut reached: Vec<EntityId> = Vec::new();
        for _ in 0..hops {
            for &entity in &frontier {
                let incident = snapshot
                    .neighbors(entity)
                    .expect("walk only reaches entities present in the snapshot");
                for fact_id in incident {
                    let t = snapshot.fact(fact_id).expect("neighbors yields live facts");
                    let other = if t.head == entity { t.tail } else { t.head };
                    if seen_entities.insert(other) {
                        reached.push(other);
                    }
                    if !provenance.contains_key(&fact_id) {
                        provenance.insert(fact_id, seed);
                        ordered.push((score, fact_id));
                    }
                }
            }
            frontier = std::mem::take(&mut reached);
        }
    }

    ordered.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1 .0.cmp(&b.1 .0)));
    ordered.truncate(max_candidates);
    let facts: Vec<FactId> = ordered.iter().map(|&(_, f)| f).collect();
    let kept: std::collections::HashSet<FactId> = facts.iter().copied().collect();
    provenance.retain(|f, _| kept.contains(f));

    Ok(CandidateSubgraph {
        seed_entities,
        facts,
        provenance,
    })
}
