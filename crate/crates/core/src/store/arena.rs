//! Append-only chunked slot storage with lock-free reads.
//!
//! The arena hands out slots indexed by dense u32 ids. Slots are written
//! exactly once by the single serialized writer and never moved or freed, so
//! readers can dereference them without coordination. The chunk spine is
//! published through an [`ArcSwap`]; growing the arena builds a new spine
//! that shares all existing chunks, so a reader holding an old spine still
//! sees every slot it could legally reach.

use arc_swap::ArcSwap;
use std::ops::Deref;
use std::sync::{Arc, OnceLock};

/// Slots per chunk. Chosen so a chunk of fact slots is a few tens of KiB:
/// large enough that spine swaps are rare, small enough that growth is cheap.
const CHUNK_LEN: usize = 1024;

type Chunk<T> = Arc<Vec<OnceLock<T>>>;

pub(crate) struct SlotArena<T> {
    spine: ArcSwap<Vec<Chunk<T>>>,
}

/// A borrowed view of one slot. Holds the chunk alive via `Arc`, so the
/// reference stays valid independent of later spine swaps.
pub(crate) struct SlotRef<T: 'static> {
    chunk: Chunk<T>,
    offset: usize,
}

impl<T> Deref for SlotRef<T> {
    type Target = T;
    #[inline]
    fn deref(&self) -> &T {
        // The writer publishes an id only after the slot is initialized, so a
        // reachable slot is always `Some`.
        self.chunk[self.offset]
            .get()
            .expect("published slot must be initialized")
    }
}

impl<T: 'static> SlotArena<T> {
    pub fn new() -> Self {
        SlotArena {
            spine: ArcSwap::from_pointee(Vec::new()),
        }
    }

    /// Fetch slot `id`, if it has been initialized.
    #[inline]
    pub fn get(&self, id: u32) -> Option<SlotRef<T>> {
        let idx = id as usize;
        let spine = self.spine.load();
        let chunk = spine.get(idx / CHUNK_LEN)?;
        // Distinguish "slot exists" from "chunk allocated but slot unset".
        chunk[idx % CHUNK_LEN].get()?;
        Some(SlotRef {
            chunk: Arc::clone(chunk),
            offset: idx % CHUNK_LEN,
        })
    }

    /// Initialize slot `id`. Writer-only; ids must be assigned sequentially
    /// and each slot set exactly once.
    pub fn set(&self, id: u32, value: T) {
        let idx = id as usize;
        let chunk_idx = idx / CHUNK_LEN;
        if self.spine.load().len() <= chunk_idx {
            // Grow: clone the spine (chunk Arcs, not contents) and append
            // fresh chunks. Readers keep whichever spine they loaded.
            let mut grown: Vec<Chunk<T>> = self.spine.load().as_ref().clone();
            while grown.len() <= chunk_idx {
                grown.push(Arc::new((0..CHUNK_LEN).map(|_| OnceLock::new()).collect()));
            }
            self.spine.store(Arc::new(grown));
        }
        let spine = self.spine.load();
        let ok = spine[chunk_idx][idx % CHUNK_LEN].set(value).is_ok();
        debug_assert!(ok, "slot {idx} initialized twice");
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn get_before_set_is_none() {
        let a: SlotArena<u64> = SlotArena::new();
        assert!(a.get(0).is_none());
        a.set(0, 7);
        assert_eq!(*a.get(0).unwrap(), 7);
        assert!(a.get(1).is_none());
    }

    #[test]
    fn growth_preserves_existing_slots() {
        let a: SlotArena<usize> = SlotArena::new();
        let n = CHUNK_LEN * 3 + 17;
        for i in 0..n {
            a.set(i as u32, i * 10);
        }
        for i in 0..n {
            assert_eq!(*a.get(i as u32).unwrap(), i * 10);
        }
        assert!(a.get(n as u32).is_none());
    }

    #[test]
    fn slot_ref_outlives_spine_swap() {
        let a: SlotArena<String> = SlotArena::new();
        a.set(0, "keep".to_string());
        let r = a.get(0).unwrap();
        // Force several spine swaps.
        for i in 1..(CHUNK_LEN * 4) as u32 {
            a.set(i, i.to_string());
        }
        assert_eq!(&*r, "keep");
    }
}
