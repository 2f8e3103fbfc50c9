//! Nearest-neighbor index over entity description embeddings.
//!
//! Two explicit modes, never silently chosen:
//!
//! * **Exact** — full scan, true top-n. The right default at desk scale
//!   (≲10^5 entities) where a scan is microseconds and exactness makes
//!   oracle tests trivial.
//! * **GraphApproximate** — a layered proximity graph (HNSW-style): each
//!   node gets a geometrically-distributed level, links to its nearest
//!   neighbors per layer, and queries descend greedily through the layers
//!   before a beam search over layer 0. Sub-linear queries at scale.
//!
//! Everything is deterministic: node levels come from a hash of the entity
//! id (not an RNG stream, so rebuild order and process restarts cannot
//! change them), and every candidate ordering breaks ties on ids.
//!
//! Concurrency: readers share an `RwLock` snapshot of the graph; an insert
//! takes the write lock, so a concurrent search sees the index either
//! before or after that insert, never mid-rewire.

use super::{dot, DenseTextEmbedding, RetrievalError};
use crate::ids::EntityId;
use crate::util::Fnv64;
use std::collections::{BinaryHeap, HashMap, HashSet};
use std::sync::RwLock;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnnMode {
    Exact,
    GraphApproximate,
}

/// Tuning knobs for the proximity graph. Defaults are sized for ≥0.95
/// recall@200 on feature-hashed description embeddings at 10^4 entities.
#[derive(Debug, Clone)]
pub struct AnnParams {
    /// Links kept per node per layer (layer 0 keeps twice as many).
    pub max_links: usize,
    /// Beam width while wiring a new node in.
    pub ef_construction: usize,
    /// Minimum beam width while searching (the effective beam is
    /// `max(ef_search, n)`).
    pub ef_search: usize,
    /// Salt for the hash that assigns node levels.
    pub level_seed: u64,
}

impl Default for AnnParams {
    fn default() -> Self {
        AnnParams {
            max_links: 24,
            ef_construction: 200,
            ef_search: 400,
            level_seed: 0x616e6e5f6c766c, // "ann_lvl"
        }
    }
}

struct Node {
    id: EntityId,
    vec: Vec<f64>,
    /// links[lev] holds positions (not entity ids) of neighbors at layer lev.
    links: Vec<Vec<u32>>,
}

struct State {
    nodes: Vec<Node>,
    position_of: HashMap<u32, u32>,
    /// Position of the entry node (the one with the highest level).
    entry: Option<u32>,
}

pub struct AnnIndex {
    mode: AnnMode,
    d_h: usize,
    build_epoch: u64,
    params: AnnParams,
    state: RwLock<State>,
}

/// Max-heap entry ordered by (similarity, position); total order via
/// `total_cmp` keeps NaN-free floats deterministic.
#[derive(PartialEq)]
struct Cand(f64, u32);
impl Eq for Cand {}
impl Ord for Cand {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.0
            .total_cmp(&other.0)
            .then(other.1.cmp(&self.1))
    }
}
impl PartialOrd for Cand {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl AnnIndex {
    pub fn new(mode: AnnMode, d_h: usize, build_epoch: u64, params: AnnParams) -> Self {
        assert!(d_h > 0 && params.max_links >= 2);
        AnnIndex {
            mode,
            d_h,
            build_epoch,
            params,
            state: RwLock::new(State {
                nodes: Vec::new(),
                position_of: HashMap::new(),
                entry: None,
            }),
        }
    }

    /// Exact-mode index with default parameters.
    pub fn exact(d_h: usize, build_epoch: u64) -> Self {
        Self::new(AnnMode::Exact, d_h, build_epoch, AnnParams::default())
    }

    pub fn mode(&self) -> AnnMode {
        self.mode
    }

    pub fn build_epoch(&self) -> u64 {
        self.build_epoch
    }

    pub fn indexed_count(&self) -> usize {
        self.read().nodes.len()
    }

    pub fn contains(&self, entity: EntityId) -> bool {
        self.read().position_of.contains_key(&entity.0)
    }

    fn read(&self) -> std::sync::RwLockReadGuard<'_, State> {
        self.state.read().expect("ann index lock poisoned")
    }

    /// Geometric level from a salted hash of the entity id. Hash-derived
    /// (rather than drawn from a shared RNG) so an entity's level never
    /// depends on insertion order or on how many inserts preceded it.
    fn level_for(&self, entity: EntityId) -> usize {
        let mut h = Fnv64::new();
        h.update(&self.params.level_seed.to_le_bytes());
        h.update(&entity.0.to_le_bytes());
        let u = ((h.finish() >> 11) as f64 / (1u64 << 53) as f64).max(f64::EPSILON);
        let ml = 1.0 / (self.params.max_links as f64).ln();
        ((-u.ln() * ml) as usize).min(16)
    }

    /// Add one entity. The graph is wired incrementally — a bulk build is
    /// just this in a loop, so there is no separate rebuild path.
    pub fn insert(
        &self,
        entity: EntityId,
        emb: &DenseTextEmbedding,
    ) -> Result<(), RetrievalError> {
        if emb.dim() != self.d_h {
            return Err(RetrievalError::DimensionMismatch {
                expected: self.d_h,
                got: emb.dim(),
            });
        }
        let level = self.level_for(entity);
        let mut st = self.state.write().expect("ann index lock poisoned");
        if st.position_of.contains_key(&entity.0) {
            return Err(RetrievalError::AlreadyIndexed(entity));
        }
        let new_pos = st.nodes.len() as u32;
        let q = emb.vector.clone();

        // Wire-in plan per level, computed before any mutation.
        let mut per_level: Vec<Vec<u32>> = vec![Vec::new(); level + 1];
        if let Some(entry) = st.entry {
            let top = st.nodes[entry as usize].links.len() - 1;
            let mut ep = entry;
            for lev in ((level + 1)..=top).rev() {
                ep = greedy_step(&st, &q, ep, lev);
            }
            for lev in (0..=level.min(top)).rev() {
                let found = search_layer(&st, &q, &[ep], self.params.ef_construction, lev);
                let cap = self.params.max_links;
                per_level[lev] = found.iter().take(cap).map(|&(_, p)| p).collect();
                if let Some(&(_, best)) = found.first() {
                    ep = best;
                }
            }
        }

        st.nodes.push(Node {
            id: entity,
            vec: q,
            links: per_level.clone(),
        });
        st.position_of.insert(entity.0, new_pos);
        match st.entry {
            None => st.entry = Some(new_pos),
            Some(entry) => {
                if level + 1 > st.nodes[entry as usize].links.len() {
                    st.entry = Some(new_pos);
                }
            }
        }

        // Back-links, pruned to layer capacity by similarity.
        for (lev, nbrs) in per_level.iter().enumerate() {
            let cap = if lev == 0 {
                2 * self.params.max_links
            } else {
                self.params.max_links
            };
            for &p in nbrs {
                st.nodes[p as usize].links[lev].push(new_pos);
                if st.nodes[p as usize].links[lev].len() > cap {
                    let pivot = st.nodes[p as usize].vec.clone();
                    let mut scored: Vec<(f64, u32)> = st.nodes[p as usize].links[lev]
                        .iter()
                        .map(|&o| (dot(&pivot, &st.nodes[o as usize].vec), o))
                        .collect();
                    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
                    scored.truncate(cap);
                    st.nodes[p as usize].links[lev] = scored.into_iter().map(|(_, o)| o).collect();
                }
            }
        }
        Ok(())
    }

    /// Top-n entities by cosine similarity, ordered by descending score and
    /// ascending EntityId on ties. Exact mode scans; approximate mode runs
    /// the layered graph search. Asking for more results than the index
    /// holds returns everything.
    pub fn search(
        &self,
        query: &DenseTextEmbedding,
        n: usize,
    ) -> Result<Vec<(EntityId, f64)>, RetrievalError> {
        assert!(n >= 1, "n must be at least 1");
        if query.dim() != self.d_h {
            return Err(RetrievalError::DimensionMismatch {
                expected: self.d_h,
                got: query.dim(),
            });
        }
        let st = self.read();
        if st.nodes.is_empty() {
            return Err(RetrievalError::EmptyIndex);
        }
        let mut scored: Vec<(f64, EntityId)> = match self.mode {
            AnnMode::Exact => st
                .nodes
                .iter()
                .map(|node| (dot(&query.vector, &node.vec), node.id))
                .collect(),
            AnnMode::GraphApproximate => {
                let entry = st.entry.expect("non-empty index has an entry point");
                let top = st.nodes[entry as usize].links.len() - 1;
                let mut ep = entry;
                for lev in (1..=top).rev() {
                    ep = greedy_step(&st, &query.vector, ep, lev);
                }
                let ef = self.params.ef_search.max(n);
                search_layer(&st, &query.vector, &[ep], ef, 0)
                    .into_iter()
                    .map(|(s, p)| (s, st.nodes[p as usize].id))
                    .collect()
            }
        };
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        scored.truncate(n);
        Ok(scored.into_iter().map(|(s, id)| (id, s)).collect())
    }
}

/// Hill-climb at one layer: move to the best-scoring neighbor until no
/// neighbor improves on the current node. Ties prefer the lower position so
/// the walk is reproducible.
fn greedy_step(st: &State, q: &[f64], start: u32, lev: usize) -> u32 {
    let mut cur = start;
    let mut cur_sim = dot(q, &st.nodes[cur as usize].vec);
    loop {
        let mut improved = false;
        let links = &st.nodes[cur as usize].links;
        if lev >= links.len() {
            return cur;
        }
        for &p in &links[lev] {
            let s = dot(q, &st.nodes[p as usize].vec);
            if s > cur_sim || (s == cur_sim && p < cur) {
                cur = p;
                cur_sim = s;
                improved = true;
            }
        }
        if !improved {
            return cur;
        }
    }
}

/// Beam search over one layer: classic two-heap expansion keeping the `ef`
/// best nodes seen. Returns (similarity, position) sorted by descending
/// similarity, ascending position.
fn search_layer(st: &State, q: &[f64], entries: &[u32], ef: usize, lev: usize) -> Vec<(f64, u32)> {
    let mut visited: HashSet<u32> = entries.iter().copied().collect();
    let mut frontier: BinaryHeap<Cand> = BinaryHeap::new();
    // Results as a min-heap (via Reverse ordering on Cand fields) capped at ef.
    let mut results: BinaryHeap<std::cmp::Reverse<Cand>> = BinaryHeap::new();
    for &e in entries {
        let s = dot(q, &st.nodes[e as usize].vec);
        frontier.push(Cand(s, e));
        results.push(std::cmp::Reverse(Cand(s, e)));
    }
    while let Some(Cand(sim, pos)) = frontier.pop() {
        let worst = results.peek().expect("results never empty").0 .0;
        if results.len() >= ef && sim < worst {
            break;
        }
        let links = &st.nodes[pos as usize].links;
        if lev >= links.len() {
            continue;
        }
        for &p in &links[lev] {
            if !visited.insert(p) {
                continue;
            }
            let s = dot(q, &st.nodes[p as usize].vec);
            let worst = results.peek().expect("results never empty").0 .0;
            if results.len() < ef || s > worst {
                frontier.push(Cand(s, p));
                results.push(std::cmp::Reverse(Cand(s, p)));
                if results.len() > ef {
                    results.pop();
                }
            }
        }
    }
    let mut out: Vec<(f64, u32)> = results.into_iter().map(|r| (r.0 .0, r.0 .1)).collect();
    out.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::retrieval::embed_text;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit_embedding(rng: &mut ChaCha8Rng, d: usize) -> DenseTextEmbedding {
        let mut v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= norm);
        DenseTextEmbedding {
            vector: v,
            source_text_hash: 0,
        }
    }

    #[test]
    fn empty_index_rejects_search() {
        let idx = AnnIndex::exact(8, 0);
        let q = embed_text("anything", 8).unwrap();
        assert!(matches!(idx.search(&q, 1), Err(RetrievalError::EmptyIndex)));
    }

    #[test]
    fn own_embedding_ranks_first() {
        for mode in [AnnMode::Exact, AnnMode::GraphApproximate] {
            let idx = AnnIndex::new(mode, 64, 0, AnnParams::default());
            let texts = ["alpha station", "beta reactor", "gamma array", "delta farm"];
            for (i, t) in texts.iter().enumerate() {
                idx.insert(EntityId(i as u32), &embed_text(t, 64).unwrap())
                    .unwrap();
            }
            let q = embed_text("gamma array", 64).unwrap();
            let hits = idx.search(&q, 1).unwrap();
            assert_eq!(hits[0].0, EntityId(2));
            assert!((hits[0].1 - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn duplicate_insert_is_rejected_and_count_tracks() {
        let idx = AnnIndex::exact(16, 3);
        let e = embed_text("x y z", 16).unwrap();
        idx.insert(EntityId(5), &e).unwrap();
        assert_eq!(idx.indexed_count(), 1);
        assert_eq!(idx.build_epoch(), 3);
        assert!(matches!(
            idx.insert(EntityId(5), &e),
            Err(RetrievalError::AlreadyIndexed(EntityId(5)))
        ));
        assert_eq!(idx.indexed_count(), 1);
    }

    #[test]
    fn wrong_dimension_is_rejected() {
        let idx = AnnIndex::exact(16, 0);
        let e = embed_text("abc", 8).unwrap();
        assert!(matches!(
            idx.insert(EntityId(0), &e),
            Err(RetrievalError::DimensionMismatch { expected: 16, got: 8 })
        ));
    }

    #[test]
    fn exact_search_returns_all_sorted_when_n_equals_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let idx = AnnIndex::exact(32, 0);
        let q = unit_embedding(&mut rng, 32);
        for i in 0..50u32 {
            idx.insert(EntityId(i), &unit_embedding(&mut rng, 32)).unwrap();
        }
        let hits = idx.search(&q, 50).unwrap();
        assert_eq!(hits.len(), 50);
        for w in hits.windows(2) {
            assert!(
                w[0].1 > w[1].1 || (w[0].1 == w[1].1 && w[0].0 .0 < w[1].0 .0),
                "ordering violated: {w:?}"
            );
        }
        // Dominance: nothing outside the returned set beats anything in it
        // (trivially true for a full return, so check a strict prefix too).
        let top10 = idx.search(&q, 10).unwrap();
        assert_eq!(&hits[..10], &top10[..]);
    }

    #[test]
    fn insertion_order_does_not_change_exact_results() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let embs: Vec<DenseTextEmbedding> =
            (0..300).map(|_| unit_embedding(&mut rng, 32)).collect();
        let forward = AnnIndex::exact(32, 0);
        let backward = AnnIndex::exact(32, 0);
        for i in 0..300u32 {
            forward.insert(EntityId(i), &embs[i as usize]).unwrap();
            let j = 299 - i;
            backward.insert(EntityId(j), &embs[j as usize]).unwrap();
        }
        for _ in 0..20 {
            let q = unit_embedding(&mut rng, 32);
            assert_eq!(forward.search(&q, 25).unwrap(), backward.search(&q, 25).unwrap());
        }
    }

    #[test]
    fn approximate_search_is_deterministic() {
        let build = || {
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            let idx = AnnIndex::new(AnnMode::GraphApproximate, 32, 0, AnnParams::default());
            for i in 0..500u32 {
                idx.insert(EntityId(i), &unit_embedding(&mut rng, 32)).unwrap();
            }
            idx
        };
        let (a, b) = (build(), build());
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..10 {
            let q = unit_embedding(&mut rng, 32);
            let ra = a.search(&q, 20).unwrap();
            assert_eq!(ra, b.search(&q, 20).unwrap());
            assert_eq!(ra, a.search(&q, 20).unwrap());
        }
    }

    #[test]
    fn approximate_recall_beats_095_on_description_embeddings() {
        // Realistic corpus: feature-hashed descriptions, as the engine uses.
        let d = 64;
        let idx = AnnIndex::new(AnnMode::GraphApproximate, d, 0, AnnParams::default());
        let exact = AnnIndex::exact(d, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let nouns = ["plant", "reactor", "array", "station", "farm", "grid", "mill", "harbor"];
        let adjs = ["solar", "tidal", "lunar", "coastal", "alpine", "arctic", "urban", "remote"];
        for i in 0..1500u32 {
            let text = format!(
                "{} {} number {i}",
                adjs[rng.random_range(0..adjs.len())],
                nouns[rng.random_range(0..nouns.len())]
            );
            let e = embed_text(&text, d).unwrap();
            idx.insert(EntityId(i), &e).unwrap();
            exact.insert(EntityId(i), &e).unwrap();
        }
        let mut hits = 0usize;
        let mut total = 0usize;
        for t in 0..20 {
            let q = embed_text(
                &format!("{} {} query {t}", adjs[t % adjs.len()], nouns[(t * 3) % nouns.len()]),
                d,
            )
            .unwrap();
            let truth: HashSet<EntityId> =
                exact.search(&q, 50).unwrap().into_iter().map(|(id, _)| id).collect();
            for (id, _) in idx.search(&q, 50).unwrap() {
                if truth.contains(&id) {
                    hits += 1;
                }
            }
            total += 50;
        }
        let recall = hits as f64 / total as f64;
        assert!(recall >= 0.95, "recall@50 = {recall}");
    }
}
