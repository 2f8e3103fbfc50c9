//! Store behavior checked against independent oracles: a scripted replay
//! model for visibility, a full-scan model for adjacency, concurrent
//! reader/writer prefix consistency, and persistence round trips.

use dynkg_core::ids::{EntityId, FactId, Triplet};
use dynkg_core::store::{KgStore, StoreError};
use proptest::prelude::*;
use std::collections::{BTreeMap, BTreeSet};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

/// A deliberately naive reference model: plain maps, full scans, no sharing.
#[derive(Default, Clone)]
struct ModelState {
    facts: BTreeMap<u32, (Triplet, bool)>, // id -> (triplet, live)
    epoch: u64,
}

impl ModelState {
    fn live_ids(&self) -> BTreeSet<u32> {
        self.facts
            .iter()
            .filter(|(_, (_, live))| *live)
            .map(|(id, _)| *id)
            .collect()
    }
    fn neighbors_of(&self, e: EntityId) -> Vec<u32> {
        self.facts
            .iter()
            .filter(|(_, (t, live))| *live && (t.head == e || t.tail == e))
            .map(|(id, _)| *id)
            .collect()
    }
}

#[derive(Debug, Clone)]
enum Op {
    AddFact { head: u8, rel: u8, tail: u8, ts: i64 },
    RemoveNthLive(u8),
}

fn op_strategy() -> impl Strategy<Value = Op> {
    prop_oneof![
        4 => (0u8..12, 0u8..3, 0u8..12, -1000i64..1000).prop_map(|(head, rel, tail, ts)| {
            Op::AddFact { head, rel, tail, ts }
        }),
        1 => (0u8..32).prop_map(Op::RemoveNthLive),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Random add/remove sequences: the store's visible live set, neighbor
    /// lists and live counts must match the naive replay model after every
    /// committed mutation, and historical snapshots must match the model
    /// state recorded at that epoch.
    #[test]
    fn replay_model_agrees_with_store(ops in prop::collection::vec(op_strategy(), 1..60)) {
        let store = KgStore::new();
        let mut ids = Vec::new();
        for i in 0..12 {
            ids.push(store.add_entity(&format!("n{i}"), "node").unwrap());
        }
        let mut rels = Vec::new();
        for i in 0..3 {
            rels.push(store.add_relation(&format!("r{i}")).unwrap());
        }

        let mut model = ModelState { facts: BTreeMap::new(), epoch: store.epoch() };
        let mut history: Vec<ModelState> = vec![model.clone()];

        for op in ops {
            match op {
                Op::AddFact { head, rel, tail, ts } => {
                    let (h, r, t) = (ids[head as usize % 12], rels[rel as usize % 3], ids[tail as usize % 12]);
                    let dup = model
                        .facts
                        .values()
                        .any(|(f, live)| *live && f.head == h && f.relation == r && f.tail == t);
                    match store.add_fact(h, r, t, ts) {
                        Ok(fid) => {
                            prop_assert!(!dup, "store accepted a duplicate live key");
                            model.facts.insert(
                                fid.0,
                                (Triplet { head: h, relation: r, tail: t, timestamp_ms: ts }, true),
                            );
                            model.epoch += 1;
                            history.push(model.clone());
                        }
                        Err(StoreError::DuplicateFact(..)) => prop_assert!(dup),
                        Err(e) => return Err(TestCaseError::fail(format!("unexpected: {e}"))),
                    }
                }
                Op::RemoveNthLive(n) => {
                    let live: Vec<u32> = model.live_ids().into_iter().collect();
                    if live.is_empty() {
                        continue;
                    }
                    let victim = live[n as usize % live.len()];
                    store.remove_fact(FactId(victim)).unwrap();
                    model.facts.get_mut(&victim).unwrap().1 = false;
                    model.epoch += 1;
                    history.push(model.clone());
                }
            }
            // Current snapshot vs model.
            let snap = store.snapshot();
            prop_assert_eq!(snap.epoch(), model.epoch);
            let visible: BTreeSet<u32> = snap.live_facts().map(|(f, _)| f.0).collect();
            prop_assert_eq!(&visible, &model.live_ids());
            prop_assert_eq!(snap.live_fact_count(), model.live_ids().len() as u64);
            for (i, e) in ids.iter().enumerate() {
                let got: Vec<u32> = snap.neighbors(*e).unwrap().iter().map(|f| f.0).collect();
                prop_assert_eq!(got, model.neighbors_of(*e), "neighbors of entity {}", i);
            }
        }

        // Historical snapshots reproduce every recorded model state.
        for past in history.iter() {
            let snap = store.snapshot_at(past.epoch).unwrap();
            let visible: BTreeSet<u32> = snap.live_facts().map(|(f, _)| f.0).collect();
            prop_assert_eq!(&visible, &past.live_ids(), "epoch {}", past.epoch);
        }
    }
}

/// Readers racing a writer must always observe a clean committed prefix:
/// every snapshot corresponds to some epoch e, containing exactly the facts
/// committed by the first e batches, with internally consistent counts.
#[test]
fn concurrent_readers_see_committed_prefixes() {
    let store = KgStore::new();
    let n_entities = 64u32;
    for i in 0..n_entities {
        store.add_entity(&format!("n{i}"), "node").unwrap();
    }
    let rel = store.add_relation("r").unwrap();
    let base_epoch = store.epoch();

    let writes = 3000u32;
    let stop = Arc::new(AtomicBool::new(false));
    let mut readers = Vec::new();
    for _ in 0..4 {
        let store = store.clone();
        let stop = Arc::clone(&stop);
        readers.push(std::thread::spawn(move || {
            let mut checked = 0u64;
            while !stop.load(Ordering::Relaxed) {
                let snap = store.snapshot();
                let committed_facts = snap.epoch().saturating_sub(base_epoch);
                // Each batch adds exactly one fact, so the live set must be
                // precisely the prefix 0..committed_facts.
                assert_eq!(snap.live_fact_count(), committed_facts);
                assert_eq!(u64::from(snap.fact_watermark()), committed_facts);
                let seen: Vec<u32> = snap.live_facts().map(|(f, _)| f.0).collect();
                assert_eq!(seen.len() as u64, committed_facts);
                assert!(seen.iter().enumerate().all(|(i, id)| *id == i as u32));
                // Adjacency walks during writes stay within the watermark.
                let e = EntityId((checked % u64::from(n_entities)) as u32);
                for f in snap.neighbors(e).unwrap() {
                    assert!(f.0 < snap.fact_watermark());
                    assert!(snap.fact(f).is_some());
                }
                checked += 1;
            }
            checked
        }));
    }

    for i in 0..writes {
        let h = EntityId(i % n_entities);
        let t = EntityId((i / n_entities + i + 1) % n_entities);
        store
            .add_fact(h, rel, t, i as i64)
            .unwrap_or_else(|e| panic!("write {i}: {e}"));
    }
    stop.store(true, Ordering::Relaxed);
    let total: u64 = readers.into_iter().map(|h| h.join().unwrap()).sum();
    assert!(total > 0, "readers made no progress");
    assert_eq!(store.snapshot().live_fact_count(), u64::from(writes));
}

#[test]
fn persistence_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let store_dir = dir.path().join("store");
    let store = KgStore::open(&store_dir).unwrap();
    let a = store.add_entity("alpha", "entity alpha profile").unwrap();
    let b = store.add_entity("beta", "entity beta profile").unwrap();
    let r = store.add_relation("linked_to").unwrap();
    let f0 = store.add_fact(a, r, b, 100).unwrap();
    store.add_fact(b, r, a, 200).unwrap();
    store.remove_fact(f0).unwrap();

    // Same state serialized twice -> identical bytes.
    let dump1 = dir.path().join("dump1.bin");
    let dump2 = dir.path().join("dump2.bin");
    store.write_snapshot_to(&dump1).unwrap();
    store.write_snapshot_to(&dump2).unwrap();
    assert_eq!(std::fs::read(&dump1).unwrap(), std::fs::read(&dump2).unwrap());

    let epoch = store.epoch();
    drop(store);

    // Reload (pure WAL replay) and compare observable state + re-dump bytes.
    let reloaded = KgStore::open(&store_dir).unwrap();
    assert_eq!(reloaded.epoch(), epoch);
    let snap = reloaded.snapshot();
    assert_eq!(snap.entity_count(), 2);
    assert_eq!(snap.live_fact_count(), 1);
    assert_eq!(snap.entity(a).unwrap().name(), "alpha");
    assert_eq!(snap.entity(a).unwrap().description(), "entity alpha profile");
    assert!(snap.fact(f0).is_none());
    let dump3 = dir.path().join("dump3.bin");
    reloaded.write_snapshot_to(&dump3).unwrap();
    assert_eq!(std::fs::read(&dump1).unwrap(), std::fs::read(&dump3).unwrap());

    // Ids continue where they left off; no reuse after reload.
    assert_eq!(reloaded.add_entity("gamma", "third").unwrap(), EntityId(2));
    assert_eq!(
        reloaded.add_fact(a, r, b, 300).unwrap(),
        FactId(2),
        "fact ids must not be reused after reload"
    );
}

#[test]
fn compaction_preserves_state_and_truncates_log() {
    let dir = tempfile::tempdir().unwrap();
    let store_dir = dir.path().join("store");
    let store = KgStore::open(&store_dir).unwrap();
    let mut ids = Vec::new();
    for i in 0..20 {
        ids.push(store.add_entity(&format!("e{i}"), "d").unwrap());
    }
    let r = store.add_relation("rel").unwrap();
    for i in 0..19usize {
        store.add_fact(ids[i], r, ids[i + 1], i as i64).unwrap();
    }
    store.remove_fact(FactId(3)).unwrap();
    let dump_before = dir.path().join("before.bin");
    store.write_snapshot_to(&dump_before).unwrap();

    store.compact().unwrap();
    let wal_len = std::fs::metadata(store_dir.join(dynkg_core::store::wal_file_name()))
        .unwrap()
        .len();
    assert_eq!(wal_len, 0, "compaction should start a fresh log");

    // Post-compaction commits land in the new log and survive reload.
    store.add_fact(ids[5], r, ids[2], 99).unwrap();
    let epoch = store.epoch();
    drop(store);

    let reloaded = KgStore::open(&store_dir).unwrap();
    assert_eq!(reloaded.epoch(), epoch);
    assert_eq!(reloaded.snapshot().live_fact_count(), 19);
    assert_eq!(
        reloaded.lookup_fact(ids[5], r, ids[2]).is_some(),
        true,
        "post-compaction fact lost"
    );
}

#[test]
fn torn_log_tail_recovers_to_last_commit() {
    let dir = tempfile::tempdir().unwrap();
    let store_dir = dir.path().join("store");
    let store = KgStore::open(&store_dir).unwrap();
    let a = store.add_entity("alpha", "d").unwrap();
    let b = store.add_entity("beta", "d").unwrap();
    let r = store.add_relation("rel").unwrap();
    store.add_fact(a, r, b, 1).unwrap();
    let good_epoch = store.epoch();
    drop(store);

    // Simulate a crash mid-append: chop bytes off the log tail so the last
    // record is incomplete.
    let wal_path = store_dir.join(dynkg_core::store::wal_file_name());
    let bytes = std::fs::read(&wal_path).unwrap();
    let torn = [&bytes[..], &[3u8, 0, 0][..]].concat(); // half an add-fact record
    std::fs::write(&wal_path, &torn).unwrap();

    let recovered = KgStore::open(&store_dir).unwrap();
    assert_eq!(recovered.epoch(), good_epoch);
    assert_eq!(recovered.snapshot().live_fact_count(), 1);
    // The torn bytes are gone: a fresh commit then a clean reload both work.
    recovered.add_fact(b, r, a, 2).unwrap();
    let epoch = recovered.epoch();
    drop(recovered);
    let again = KgStore::open(&store_dir).unwrap();
    assert_eq!(again.epoch(), epoch);
    assert_eq!(again.snapshot().live_fact_count(), 2);
}

/// Triplet key uniqueness among live facts across interleaved batches.
#[test]
fn batch_visibility_is_atomic() {
    let store = KgStore::new();
    let a = store.add_entity("a", "d").unwrap();
    let b = store.add_entity("b", "d").unwrap();
    let r = store.add_relation("r").unwrap();
    let before = store.snapshot();

    store
        .batch(|batch| {
            let c = batch.add_entity("c", "mid-batch entity")?;
            batch.add_fact(a, r, c, 1)?;
            batch.add_fact(c, r, b, 2)?;
            Ok(())
        })
        .unwrap();

    // Old snapshot: neither entity nor facts; new snapshot: all of it.
    assert_eq!(before.entity_count(), 2);
    assert_eq!(before.live_fact_count(), 0);
    let after = store.snapshot();
    assert_eq!(after.entity_count(), 3);
    assert_eq!(after.live_fact_count(), 2);
    assert_eq!(after.epoch(), before.epoch() + 1);
}
