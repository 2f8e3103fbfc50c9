//! Mutable triplet store with snapshot isolation.
//!
//! Design at a glance:
//!
//! ```text
//!   writers (serialized by a mutex)          readers (lock-free)
//!   ──────────────────────────────           ───────────────────
//!   validate batch                           load published meta
//!   append + flush WAL                       (epoch + watermarks)
//!   init slots (append-only arenas)    ──►   walk slots < watermark
//!   link adjacency chains                    filter by added/removed epoch
//!   publish new meta (atomic swap)
//! ```
//!
//! * Objects live in append-only slot arenas ([`arena::SlotArena`]); ids are
//!   dense and never reused. Removal tombstones a fact by recording the epoch
//!   at which the removal committed.
//! * A snapshot is just `(epoch, watermarks)` plus a handle to the arenas, so
//!   opening one is O(1) and never blocks writers. A fact is visible to a
//!   snapshot iff `added_epoch <= epoch < removed_at_epoch`.
//! * Adjacency is an intrusive linked list: each fact slot points at the
//!   previous fact incident to its head (and tail), and each entity slot
//!   holds the most recent incident fact. Readers walk the chain and skip
//!   facts beyond their watermark.
//! * Mutations are batched: a batch validates fully before anything is
//!   applied, writes ahead to the log, then applies and publishes. The epoch
//!   increases by exactly one per committed non-empty batch.

mod arena;
mod persist;

use crate::ids::{EntityId, FactId, RelationId, Triplet};
use arc_swap::ArcSwap;
use arena::{SlotArena, SlotRef};
use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, MutexGuard};
use thiserror::Error;

pub use persist::wal_file_name;

/// Sentinel for "no fact" in adjacency chain heads.
const NO_FACT: u64 = u64::MAX;
/// Sentinel for "never removed" in fact tombstones.
const LIVE: u64 = u64::MAX;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("name already registered: {0:?}")]
    DuplicateName(String),
    #[error("live fact with identical (head, relation, tail) already exists: ({0}, {1}, {2})")]
    DuplicateFact(EntityId, RelationId, EntityId),
    #[error("unknown entity id {0:?}")]
    UnknownEntity(EntityId),
    #[error("unknown relation id {0:?}")]
    UnknownRelation(RelationId),
    #[error("unknown or tombstoned fact id {0:?}")]
    UnknownFact(FactId),
    #[error("empty name")]
    EmptyName,
    #[error("invalid name {0:?}: names must be free of tabs/newlines")]
    InvalidName(String),
    #[error("cannot open snapshot at epoch {requested}: store is at epoch {current}")]
    FutureEpoch { requested: u64, current: u64 },
    #[error("persistence I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("persistent state is corrupt: {0}")]
    Corrupt(String),
}

// ---------------------------------------------------------------------------
// Slots
// ---------------------------------------------------------------------------

struct EntitySlot {
    name: String,
    description: String,
    added_epoch: u64,
    /// Most recent fact incident to this entity (head or tail side), or
    /// `NO_FACT`. Written by the serialized writer, read lock-free.
    last_incident: AtomicU64,
}

struct RelationSlot {
    name: String,
    added_epoch: u64,
}

struct FactSlot {
    head: EntityId,
    relation: RelationId,
    tail: EntityId,
    timestamp_ms: i64,
    added_epoch: u64,
    /// Previous fact incident to `head`, forming the head-side chain link.
    prev_for_head: Option<FactId>,
    /// Previous fact incident to `tail`. Unused when `head == tail` (the
    /// head link covers the single chain membership of a self-loop).
    prev_for_tail: Option<FactId>,
    /// Epoch at which a removal of this fact committed, or `LIVE`.
    removed_at: AtomicU64,
}

impl FactSlot {
    #[inline]
    fn triplet(&self) -> Triplet {
        Triplet {
            head: self.head,
            relation: self.relation,
            tail: self.tail,
            timestamp_ms: self.timestamp_ms,
        }
    }
}

/// Published watermarks; swapped atomically at each commit.
#[derive(Clone, Copy)]
struct Meta {
    epoch: u64,
    n_entities: u32,
    n_relations: u32,
    n_facts: u32,
    live_facts: u64,
}

// ---------------------------------------------------------------------------
// Writer state
// ---------------------------------------------------------------------------

struct WriterState {
    entity_by_name: HashMap<String, EntityId>,
    relation_by_name: HashMap<String, RelationId>,
    /// Live `(head, relation, tail)` keys, for duplicate detection.
    live_keys: HashMap<(u32, u32, u32), FactId>,
    n_entities: u32,
    n_relations: u32,
    n_facts: u32,
    live_facts: u64,
    epoch: u64,
    wal: Option<persist::WalWriter>,
    /// Fact ids committed since the embedding layer last drained the queue.
    embed_queue: Vec<FactId>,
}

struct Inner {
    entities: SlotArena<EntitySlot>,
    relations: SlotArena<RelationSlot>,
    facts: SlotArena<FactSlot>,
    meta: ArcSwap<Meta>,
    writer: Mutex<WriterState>,
    dir: Option<PathBuf>,
}

/// Handle to a triplet store. Cheap to clone; all clones share state.
#[derive(Clone)]
pub struct KgStore {
    inner: Arc<Inner>,
}

// ---------------------------------------------------------------------------
// Batches
// ---------------------------------------------------------------------------

/// A group of mutations that commits atomically under one epoch.
///
/// Every operation validates against both committed state and earlier staged
/// operations; nothing touches shared state until the batch closure returns
/// `Ok`, so a failed batch leaves the store untouched.
pub struct Batch<'a> {
    inner: &'a Inner,
    st: &'a mut WriterState,
    new_entities: Vec<(String, String)>,
    new_relations: Vec<String>,
    new_facts: Vec<Triplet>,
    removals: Vec<FactId>,
    staged_entity_names: HashMap<String, EntityId>,
    staged_relation_names: HashMap<String, RelationId>,
    staged_fact_keys: HashMap<(u32, u32, u32), FactId>,
}

fn validate_name(name: &str) -> Result<&str, StoreError> {
    let trimmed = name.trim();
    if trimmed.is_empty() {
        return Err(StoreError::EmptyName);
    }
    if trimmed.contains('\t') || trimmed.contains('\n') {
        return Err(StoreError::InvalidName(name.to_string()));
    }
    Ok(trimmed)
}

/// Descriptions may be anything printable; tabs and newlines would corrupt
/// the TSV export format, so they are folded to spaces. An empty description
/// falls back to the canonical name.
fn sanitize_description(desc: &str, fallback: &str) -> String {
    let cleaned: String = desc
        .chars()
        .map(|c| if c == '\t' || c == '\n' || c == '\r' { ' ' } else { c })
        .collect();
    let cleaned = cleaned.trim().to_string();
    if cleaned.is_empty() {
        fallback.to_string()
    } else {
        cleaned
    }
}

impl<'a> Batch<'a> {
    /// Register a new entity. Canonical names are unique among all entities
    /// ever added (tombstoning never frees a name).
    pub fn add_entity(&mut self, name: &str, description: &str) -> Result<EntityId, StoreError> {
        let name = validate_name(name)?;
        if self.st.entity_by_name.contains_key(name)
            || self.staged_entity_names.contains_key(name)
        {
            return Err(StoreError::DuplicateName(name.to_string()));
        }
        let id = EntityId(self.st.n_entities + self.new_entities.len() as u32);
        let description = sanitize_description(description, name);
        self.staged_entity_names.insert(name.to_string(), id);
        self.new_entities.push((name.to_string(), description));
        Ok(id)
    }

    /// Register a new relation type.
    pub fn add_relation(&mut self, name: &str) -> Result<RelationId, StoreError> {
        let name = validate_name(name)?;
        if self.st.relation_by_name.contains_key(name)
            || self.staged_relation_names.contains_key(name)
        {
            return Err(StoreError::DuplicateName(name.to_string()));
        }
        let id = RelationId(self.st.n_relations + self.new_relations.len() as u32);
        self.staged_relation_names.insert(name.to_string(), id);
        self.new_relations.push(name.to_string());
        Ok(id)
    }

    /// Add a fact. The `(head, relation, tail)` key must not collide with any
    /// live fact; re-adding a previously removed key is allowed and yields a
    /// fresh id.
    pub fn add_fact(
        &mut self,
        head: EntityId,
        relation: RelationId,
        tail: EntityId,
        timestamp_ms: i64,
    ) -> Result<FactId, StoreError> {
        let known_entities = self.st.n_entities + self.new_entities.len() as u32;
        if head.0 >= known_entities {
            return Err(StoreError::UnknownEntity(head));
        }
        if tail.0 >= known_entities {
            return Err(StoreError::UnknownEntity(tail));
        }
        if relation.0 >= self.st.n_relations + self.new_relations.len() as u32 {
            return Err(StoreError::UnknownRelation(relation));
        }
        let key = (head.0, relation.0, tail.0);
        let committed_live = match self.st.live_keys.get(&key) {
            Some(f) => !self.removals.contains(f),
            None => false,
        };
        if committed_live || self.staged_fact_keys.contains_key(&key) {
            return Err(StoreError::DuplicateFact(head, relation, tail));
        }
        let id = FactId(self.st.n_facts + self.new_facts.len() as u32);
        self.staged_fact_keys.insert(key, id);
        self.new_facts.push(Triplet {
            head,
            relation,
            tail,
            timestamp_ms,
        });
        Ok(id)
    }

    /// Tombstone a committed fact. Removing an already-tombstoned fact is an
    /// `UnknownFact` error (the id no longer names a live fact). Facts staged
    /// in this same batch cannot be removed (they have not committed yet).
    pub fn remove_fact(&mut self, fact: FactId) -> Result<(), StoreError> {
        if fact.0 >= self.st.n_facts {
            return Err(StoreError::UnknownFact(fact));
        }
        let slot = self
            .inner
            .facts
            .get(fact.0)
            .ok_or(StoreError::UnknownFact(fact))?;
        if slot.removed_at.load(Ordering::Acquire) != LIVE || self.removals.contains(&fact) {
            return Err(StoreError::UnknownFact(fact));
        }
        self.removals.push(fact);
        Ok(())
    }

    /// Resolve an entity by canonical name, seeing staged additions.
    pub fn lookup_entity(&self, name: &str) -> Option<EntityId> {
        let name = name.trim();
        self.st
            .entity_by_name
            .get(name)
            .or_else(|| self.staged_entity_names.get(name))
            .copied()
    }

    /// Resolve a relation by name, seeing staged additions.
    pub fn lookup_relation(&self, name: &str) -> Option<RelationId> {
        let name = name.trim();
        self.st
            .relation_by_name
            .get(name)
            .or_else(|| self.staged_relation_names.get(name))
            .copied()
    }

    /// Resolve a live fact key, seeing staged additions and removals.
    pub fn lookup_fact(
        &self,
        head: EntityId,
        relation: RelationId,
        tail: EntityId,
    ) -> Option<FactId> {
        let key = (head.0, relation.0, tail.0);
        if let Some(f) = self.staged_fact_keys.get(&key) {
            return Some(*f);
        }
        match self.st.live_keys.get(&key) {
            Some(f) if !self.removals.contains(f) => Some(*f),
            _ => None,
        }
    }

    fn is_empty(&self) -> bool {
        self.new_entities.is_empty()
            && self.new_relations.is_empty()
            && self.new_facts.is_empty()
            && self.removals.is_empty()
    }
}

// ---------------------------------------------------------------------------
// Store
// ---------------------------------------------------------------------------

impl KgStore {
    /// Create an empty in-memory store (no write-ahead log).
    pub fn new() -> Self {
        Self::build(None)
    }

    /// Open (or create) a store persisted under `dir`. Loads the most recent
    /// snapshot file if present, replays the write-ahead log tail, and keeps
    /// logging subsequent commits. A torn log tail (e.g. from a crash mid
    /// write) is discarded back to the last committed batch.
    pub fn open(dir: &Path) -> Result<Self, StoreError> {
        std::fs::create_dir_all(dir)?;
        let store = Self::build(Some(dir.to_path_buf()));
        persist::load_into(&store, dir)?;
        let mut st = store.lock_writer();
        st.wal = Some(persist::WalWriter::open_append(dir)?);
        drop(st);
        Ok(store)
    }

    fn build(dir: Option<PathBuf>) -> Self {
        KgStore {
            inner: Arc::new(Inner {
                entities: SlotArena::new(),
                relations: SlotArena::new(),
                facts: SlotArena::new(),
                meta: ArcSwap::from_pointee(Meta {
                    epoch: 0,
                    n_entities: 0,
                    n_relations: 0,
                    n_facts: 0,
                    live_facts: 0,
                }),
                writer: Mutex::new(WriterState {
                    entity_by_name: HashMap::new(),
                    relation_by_name: HashMap::new(),
                    live_keys: HashMap::new(),
                    n_entities: 0,
                    n_relations: 0,
                    n_facts: 0,
                    live_facts: 0,
                    epoch: 0,
                    wal: None,
                    embed_queue: Vec::new(),
                }),
                dir,
            }),
        }
    }

    fn lock_writer(&self) -> MutexGuard<'_, WriterState> {
        self.inner
            .writer
            .lock()
            .expect("store writer mutex poisoned")
    }

    /// Run a group of mutations as one atomically visible batch. If the
    /// closure returns an error, nothing is applied. A non-empty committed
    /// batch advances the epoch by exactly one.
    pub fn batch<T>(
        &self,
        f: impl FnOnce(&mut Batch<'_>) -> Result<T, StoreError>,
    ) -> Result<T, StoreError> {
        let mut st = self.lock_writer();
        let mut batch = Batch {
            inner: &self.inner,
            st: &mut st,
            new_entities: Vec::new(),
            new_relations: Vec::new(),
            new_facts: Vec::new(),
            removals: Vec::new(),
            staged_entity_names: HashMap::new(),
            staged_relation_names: HashMap::new(),
            staged_fact_keys: HashMap::new(),
        };
        let out = f(&mut batch)?;
        if batch.is_empty() {
            return Ok(out);
        }
        let Batch {
            new_entities,
            new_relations,
            new_facts,
            removals,
            ..
        } = batch;
        self.apply_committed(&mut st, new_entities, new_relations, new_facts, removals, true)?;
        Ok(out)
    }

    /// Apply a validated batch: write ahead to the log, mutate the arenas,
    /// publish the new meta. Called with the writer lock held.
    ///
    /// `log` is false when replaying an existing log at open time.
    fn apply_committed(
        &self,
        st: &mut WriterState,
        new_entities: Vec<(String, String)>,
        new_relations: Vec<String>,
        new_facts: Vec<Triplet>,
        removals: Vec<FactId>,
        log: bool,
    ) -> Result<(), StoreError> {
        let commit_epoch = st.epoch + 1;
        if log {
            if let Some(wal) = st.wal.as_mut() {
                wal.append_batch(&new_entities, &new_relations, &new_facts, &removals)?;
            }
        }
        // From here on nothing can fail: memory state and published meta stay
        // consistent with the durable log.
        for (name, description) in new_entities {
            let id = EntityId(st.n_entities);
            st.n_entities += 1;
            st.entity_by_name.insert(name.clone(), id);
            self.inner.entities.set(
                id.0,
                EntitySlot {
                    name,
                    description,
                    added_epoch: commit_epoch,
                    last_incident: AtomicU64::new(NO_FACT),
                },
            );
        }
        for name in new_relations {
            let id = RelationId(st.n_relations);
            st.n_relations += 1;
            st.relation_by_name.insert(name.clone(), id);
            self.inner.relations.set(
                id.0,
                RelationSlot {
                    name,
                    added_epoch: commit_epoch,
                },
            );
        }
        for t in new_facts {
            let id = FactId(st.n_facts);
            st.n_facts += 1;
            st.live_facts += 1;
            st.live_keys.insert(t.key(), id);
            let head_slot = self.inner.entities.get(t.head.0).expect("validated head");
            let prev_for_head = match head_slot.last_incident.load(Ordering::Acquire) {
                NO_FACT => None,
                p => Some(FactId(p as u32)),
            };
            let prev_for_tail = if t.tail == t.head {
                None
            } else {
                let tail_slot = self.inner.entities.get(t.tail.0).expect("validated tail");
                match tail_slot.last_incident.load(Ordering::Acquire) {
                    NO_FACT => None,
                    p => Some(FactId(p as u32)),
                }
            };
            // Initialize the slot before linking it into any chain, so a
            // reader that observes the new chain head always finds a fully
            // built slot.
            self.inner.facts.set(
                id.0,
                FactSlot {
                    head: t.head,
                    relation: t.relation,
                    tail: t.tail,
                    timestamp_ms: t.timestamp_ms,
                    added_epoch: commit_epoch,
                    prev_for_head,
                    prev_for_tail,
                    removed_at: AtomicU64::new(LIVE),
                },
            );
            head_slot
                .last_incident
                .store(id.0 as u64, Ordering::Release);
            if t.tail != t.head {
                let tail_slot = self.inner.entities.get(t.tail.0).expect("validated tail");
                tail_slot
                    .last_incident
                    .store(id.0 as u64, Ordering::Release);
            }
            st.embed_queue.push(id);
        }
        for f in removals {
            let slot = self.inner.facts.get(f.0).expect("validated removal");
            slot.removed_at.store(commit_epoch, Ordering::Release);
            st.live_keys.remove(&slot.triplet().key());
            st.live_facts -= 1;
        }
        st.epoch = commit_epoch;
        self.inner.meta.store(Arc::new(Meta {
            epoch: st.epoch,
            n_entities: st.n_entities,
            n_relations: st.n_relations,
            n_facts: st.n_facts,
            live_facts: st.live_facts,
        }));
        Ok(())
    }

    /// Register a new entity (single-mutation batch).
    pub fn add_entity(&self, name: &str, description: &str) -> Result<EntityId, StoreError> {
        self.batch(|b| b.add_entity(name, description))
    }

    /// Register a new relation type (single-mutation batch).
    pub fn add_relation(&self, name: &str) -> Result<RelationId, StoreError> {
        self.batch(|b| b.add_relation(name))
    }

    /// Add a fact (single-mutation batch). Also enqueues the fact for
    /// embedding initialization; see [`KgStore::drain_embed_queue`].
    pub fn add_fact(
        &self,
        head: EntityId,
        relation: RelationId,
        tail: EntityId,
        timestamp_ms: i64,
    ) -> Result<FactId, StoreError> {
        self.batch(|b| b.add_fact(head, relation, tail, timestamp_ms))
    }

    /// Tombstone a fact (single-mutation batch). Existing snapshots keep
    /// seeing it; snapshots opened after this commit do not.
    pub fn remove_fact(&self, fact: FactId) -> Result<(), StoreError> {
        self.batch(|b| b.remove_fact(fact))
    }

    /// Current commit epoch.
    pub fn epoch(&self) -> u64 {
        self.inner.meta.load().epoch
    }

    /// Resolve an entity id by canonical name.
    pub fn lookup_entity(&self, name: &str) -> Option<EntityId> {
        self.lock_writer().entity_by_name.get(name.trim()).copied()
    }

    /// Resolve a relation id by name.
    pub fn lookup_relation(&self, name: &str) -> Option<RelationId> {
        self.lock_writer()
            .relation_by_name
            .get(name.trim())
            .copied()
    }

    /// Resolve the live fact with the given key, if any.
    pub fn lookup_fact(
        &self,
        head: EntityId,
        relation: RelationId,
        tail: EntityId,
    ) -> Option<FactId> {
        self.lock_writer()
            .live_keys
            .get(&(head.0, relation.0, tail.0))
            .copied()
    }

    /// Take the fact ids committed since the last drain. The embedding layer
    /// consumes this queue to initialize rows for newly mentioned objects.
    pub fn drain_embed_queue(&self) -> Vec<FactId> {
        std::mem::take(&mut self.lock_writer().embed_queue)
    }

    /// Open a read snapshot of the current committed state. O(1); the
    /// snapshot is immutable and freely shareable across threads.
    pub fn snapshot(&self) -> GraphSnapshot {
        let m = **self.inner.meta.load();
        GraphSnapshot {
            inner: Arc::clone(&self.inner),
            epoch: m.epoch,
            n_entities: m.n_entities,
            n_relations: m.n_relations,
            n_facts: m.n_facts,
            live_facts: m.live_facts,
        }
    }

    /// Open a snapshot of the state as of a past epoch. Costs a scan to
    /// locate the historical watermarks and live count.
    pub fn snapshot_at(&self, epoch: u64) -> Result<GraphSnapshot, StoreError> {
        let m = **self.inner.meta.load();
        if epoch > m.epoch {
            return Err(StoreError::FutureEpoch {
                requested: epoch,
                current: m.epoch,
            });
        }
        // Objects are appended with nondecreasing epochs, so the historical
        // watermark is a prefix length, found by binary search.
        let n_entities = prefix_watermark(m.n_entities, epoch, |i| {
            self.inner.entities.get(i).expect("entity below watermark").added_epoch
        });
        let n_relations = prefix_watermark(m.n_relations, epoch, |i| {
            self.inner
                .relations
                .get(i)
                .expect("relation below watermark")
                .added_epoch
        });
        let n_facts = prefix_watermark(m.n_facts, epoch, |i| {
            self.inner.facts.get(i).expect("fact below watermark").added_epoch
        });
        let mut live_facts = 0u64;
        for i in 0..n_facts {
            let slot = self.inner.facts.get(i).expect("fact below watermark");
            if slot.removed_at.load(Ordering::Acquire) > epoch {
                live_facts += 1;
            }
        }
        Ok(GraphSnapshot {
            inner: Arc::clone(&self.inner),
            epoch,
            n_entities,
            n_relations,
            n_facts,
            live_facts,
        })
    }

    /// Write a full snapshot file and truncate the write-ahead log. Requires
    /// the store to have been opened with [`KgStore::open`].
    pub fn compact(&self) -> Result<(), StoreError> {
        let dir = self
            .inner
            .dir
            .clone()
            .ok_or_else(|| StoreError::Corrupt("compact() on an in-memory store".into()))?;
        let mut st = self.lock_writer();
        persist::write_snapshot_file(self, &st, &dir)?;
        st.wal = Some(persist::WalWriter::truncate(&dir)?);
        Ok(())
    }

    /// Serialize the current committed state to `path` (deterministic bytes:
    /// the same state always produces the same file).
    pub fn write_snapshot_to(&self, path: &Path) -> Result<(), StoreError> {
        let st = self.lock_writer();
        persist::write_snapshot_bytes_to(self, &st, path)
    }

}

impl Default for KgStore {
    fn default() -> Self {
        Self::new()
    }
}

/// Largest `n <= total` such that all ids `< n` have `added_epoch <= epoch`.
fn prefix_watermark(total: u32, epoch: u64, added_epoch_of: impl Fn(u32) -> u64) -> u32 {
    let (mut lo, mut hi) = (0u32, total);
    while lo < hi {
        let mid = lo + (hi - lo) / 2;
        if added_epoch_of(mid) <= epoch {
            lo = mid + 1;
        } else {
            hi = mid;
        }
    }
    lo
}

// ---------------------------------------------------------------------------
// Snapshots
// ---------------------------------------------------------------------------

/// An immutable view of the store at one epoch. Readers using a snapshot are
/// isolated from concurrent commits: the visible object set never changes.
/// Clones are cheap (a reference-counted pointer plus a few counters).
#[derive(Clone)]
pub struct GraphSnapshot {
    inner: Arc<Inner>,
    epoch: u64,
    n_entities: u32,
    n_relations: u32,
    n_facts: u32,
    live_facts: u64,
}

/// Borrowed view of one entity's immutable record.
pub struct EntityRef(SlotRef<EntitySlot>);

impl EntityRef {
    pub fn name(&self) -> &str {
        &self.0.name
    }
    pub fn description(&self) -> &str {
        &self.0.description
    }
}

impl GraphSnapshot {
    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    /// Number of entities visible to this snapshot. Also the exclusive upper
    /// bound of visible entity ids (ids are dense).
    pub fn entity_count(&self) -> u32 {
        self.n_entities
    }

    pub fn relation_count(&self) -> u32 {
        self.n_relations
    }

    /// Exclusive upper bound of fact ids visible to this snapshot, including
    /// tombstoned ones.
    pub fn fact_watermark(&self) -> u32 {
        self.n_facts
    }

    /// Number of facts both visible and live at this snapshot's epoch.
    pub fn live_fact_count(&self) -> u64 {
        self.live_facts
    }

    fn fact_visible_live(&self, slot: &FactSlot) -> bool {
        slot.added_epoch <= self.epoch && slot.removed_at.load(Ordering::Acquire) > self.epoch
    }

    /// Entity record, if the id is visible to this snapshot.
    pub fn entity(&self, id: EntityId) -> Option<EntityRef> {
        if id.0 >= self.n_entities {
            return None;
        }
        let slot = self.inner.entities.get(id.0)?;
        (slot.added_epoch <= self.epoch).then(|| EntityRef(slot))
    }

    /// Relation name, if the id is visible to this snapshot.
    pub fn relation_name(&self, id: RelationId) -> Option<String> {
        if id.0 >= self.n_relations {
            return None;
        }
        let slot = self.inner.relations.get(id.0)?;
        (slot.added_epoch <= self.epoch).then(|| slot.name.clone())
    }

    /// The triplet for `id`, if it is visible and live at this snapshot.
    pub fn fact(&self, id: FactId) -> Option<Triplet> {
        if id.0 >= self.n_facts {
            return None;
        }
        let slot = self.inner.facts.get(id.0)?;
        self.fact_visible_live(&slot).then(|| slot.triplet())
    }

    /// All facts incident to `entity` (as head or tail) that are visible and
    /// live, in ascending fact-id order. Walks the intrusive adjacency chain;
    /// facts committed after this snapshot are skipped.
    pub fn neighbors(&self, entity: EntityId) -> Result<Vec<FactId>, StoreError> {
        if self.entity(entity).is_none() {
            return Err(StoreError::UnknownEntity(entity));
        }
        let slot = self
            .inner
            .entities
            .get(entity.0)
            .ok_or(StoreError::UnknownEntity(entity))?;
        let mut out = Vec::new();
        let mut cursor = match slot.last_incident.load(Ordering::Acquire) {
            NO_FACT => None,
            p => Some(FactId(p as u32)),
        };
        while let Some(fid) = cursor {
            let fact = self
                .inner
                .facts
                .get(fid.0)
                .expect("chain links point at initialized slots");
            if fid.0 < self.n_facts && self.fact_visible_live(&fact) {
                out.push(fid);
            }
            cursor = if fact.head == entity {
                fact.prev_for_head
            } else {
                fact.prev_for_tail
            };
        }
        out.reverse();
        Ok(out)
    }

    /// Number of visible live facts incident to `entity`.
    pub fn degree(&self, entity: EntityId) -> Result<usize, StoreError> {
        Ok(self.neighbors(entity)?.len())
    }

    /// Iterate all visible live facts in ascending id order.
    pub fn live_facts(&self) -> impl Iterator<Item = (FactId, Triplet)> + '_ {
        (0..self.n_facts).filter_map(move |i| {
            let slot = self.inner.facts.get(i)?;
            self.fact_visible_live(&slot)
                .then(|| (FactId(i), slot.triplet()))
        })
    }
}


// Internal accessors used by the persistence code.
pub(crate) mod raw {
    use super::*;

    pub(crate) struct RawFact {
        pub head: u32,
        pub relation: u32,
        pub tail: u32,
        pub timestamp_ms: i64,
        pub added_epoch: u64,
        pub removed_at: u64,
    }

    pub(crate) fn entity(store: &KgStore, id: u32) -> (String, String, u64) {
        let s = store.inner.entities.get(id).expect("entity id in range");
        (s.name.clone(), s.description.clone(), s.added_epoch)
    }

    pub(crate) fn relation(store: &KgStore, id: u32) -> (String, u64) {
        let s = store.inner.relations.get(id).expect("relation id in range");
        (s.name.clone(), s.added_epoch)
    }

    pub(crate) fn fact(store: &KgStore, id: u32) -> RawFact {
        let s = store.inner.facts.get(id).expect("fact id in range");
        RawFact {
            head: s.head.0,
            relation: s.relation.0,
            tail: s.tail.0,
            timestamp_ms: s.timestamp_ms,
            added_epoch: s.added_epoch,
            removed_at: s.removed_at.load(Ordering::Acquire),
        }
    }

    /// Install a fully described object set at load time. Must only run on a
    /// fresh store, before any regular commits.
    pub(crate) fn install_loaded(
        store: &KgStore,
        epoch: u64,
        entities: Vec<(String, String, u64)>,
        relations: Vec<(String, u64)>,
        facts: Vec<RawFact>,
    ) {
        let mut st = store.lock_writer();
        assert!(st.n_facts == 0 && st.n_entities == 0, "load into used store");
        for (name, description, added_epoch) in entities {
            let id = EntityId(st.n_entities);
            st.n_entities += 1;
            st.entity_by_name.insert(name.clone(), id);
            store.inner.entities.set(
                id.0,
                EntitySlot {
                    name,
                    description,
                    added_epoch,
                    last_incident: AtomicU64::new(NO_FACT),
                },
            );
        }
        for (name, added_epoch) in relations {
            let id = RelationId(st.n_relations);
            st.n_relations += 1;
            st.relation_by_name.insert(name.clone(), id);
            store
                .inner
                .relations
                .set(id.0, RelationSlot { name, added_epoch });
        }
        for f in facts {
            let id = FactId(st.n_facts);
            st.n_facts += 1;
            let head_slot = store.inner.entities.get(f.head).expect("head in range");
            let prev_for_head = match head_slot.last_incident.load(Ordering::Acquire) {
                NO_FACT => None,
                p => Some(FactId(p as u32)),
            };
            let prev_for_tail = if f.tail == f.head {
                None
            } else {
                let tail_slot = store.inner.entities.get(f.tail).expect("tail in range");
                match tail_slot.last_incident.load(Ordering::Acquire) {
                    NO_FACT => None,
                    p => Some(FactId(p as u32)),
                }
            };
            store.inner.facts.set(
                id.0,
                FactSlot {
                    head: EntityId(f.head),
                    relation: RelationId(f.relation),
                    tail: EntityId(f.tail),
                    timestamp_ms: f.timestamp_ms,
                    added_epoch: f.added_epoch,
                    prev_for_head,
                    prev_for_tail,
                    removed_at: AtomicU64::new(f.removed_at),
                },
            );
            head_slot.last_incident.store(id.0 as u64, Ordering::Release);
            if f.tail != f.head {
                let tail_slot = store.inner.entities.get(f.tail).expect("tail in range");
                tail_slot.last_incident.store(id.0 as u64, Ordering::Release);
            }
            if f.removed_at == LIVE {
                st.live_facts += 1;
                store.inner.facts.get(id.0).map(|s| {
                    st.live_keys.insert(s.triplet().key(), id);
                });
            }
        }
        st.epoch = epoch;
        store.inner.meta.store(Arc::new(Meta {
            epoch,
            n_entities: st.n_entities,
            n_relations: st.n_relations,
            n_facts: st.n_facts,
            live_facts: st.live_facts,
        }));
    }

    /// Re-apply one logged batch during recovery (no re-logging).
    pub(crate) fn replay_batch(
        store: &KgStore,
        entities: Vec<(String, String)>,
        relations: Vec<String>,
        facts: Vec<Triplet>,
        removals: Vec<FactId>,
    ) -> Result<(), StoreError> {
        let mut st = store.lock_writer();
        store.apply_committed(&mut st, entities, relations, facts, removals, false)?;
        // Recovery must not re-trigger embedding initialization; the engine
        // reconciles embedding rows against the store after load.
        st.embed_queue.clear();
        Ok(())
    }
}
