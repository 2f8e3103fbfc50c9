//! Durable storage: a write-ahead log plus periodic full snapshot files.
//!
//! Commit path: every committed batch is appended to `wal.log` and flushed
//! before any in-memory state changes, so a reloaded store can never be ahead
//! of or behind the log. `compact()` writes a full `snapshot.bin` and starts
//! a fresh log. Both formats are little-endian, versioned, and deterministic:
//! serializing the same state twice yields identical bytes, and the snapshot
//! carries an FNV-1a checksum verified on load.
//!
//! Recovery discards a torn log tail (a crash mid-append) back to the last
//! complete commit record, then truncates the file there.

use super::raw::{self, RawFact};
use super::{KgStore, StoreError, WriterState, LIVE};
use crate::ids::{EntityId, FactId, RelationId, Triplet};
use crate::util::Fnv64;
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

const SNAPSHOT_MAGIC: &[u8; 4] = b"DKGS";
const SNAPSHOT_VERSION: u32 = 1;
const WAL_NAME: &str = "wal.log";
const SNAPSHOT_NAME: &str = "snapshot.bin";

/// Name of the write-ahead log file inside a store directory.
pub fn wal_file_name() -> &'static str {
    WAL_NAME
}

// Record tags.
const TAG_ADD_ENTITY: u8 = 1;
const TAG_ADD_RELATION: u8 = 2;
const TAG_ADD_FACT: u8 = 3;
const TAG_REMOVE_FACT: u8 = 4;
const TAG_COMMIT: u8 = 5;

// ---------------------------------------------------------------------------
// Byte-level helpers
// ---------------------------------------------------------------------------

struct CountingWriter<W: Write> {
    sink: W,
    hash: Fnv64,
}

impl<W: Write> CountingWriter<W> {
    fn new(sink: W) -> Self {
        CountingWriter {
            sink,
            hash: Fnv64::new(),
        }
    }
    fn put(&mut self, bytes: &[u8]) -> std::io::Result<()> {
        self.hash.update(bytes);
        self.sink.write_all(bytes)
    }
    fn put_u32(&mut self, v: u32) -> std::io::Result<()> {
        self.put(&v.to_le_bytes())
    }
    fn put_u64(&mut self, v: u64) -> std::io::Result<()> {
        self.put(&v.to_le_bytes())
    }
    fn put_i64(&mut self, v: i64) -> std::io::Result<()> {
        self.put(&v.to_le_bytes())
    }
    fn put_str(&mut self, s: &str) -> std::io::Result<()> {
        self.put_u32(s.len() as u32)?;
        self.put(s.as_bytes())
    }
}

struct SliceReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> SliceReader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        SliceReader { buf, pos: 0 }
    }
    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
    fn take(&mut self, n: usize) -> Result<&'a [u8], StoreError> {
        if self.remaining() < n {
            return Err(StoreError::Corrupt("unexpected end of file".into()));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }
    fn get_u8(&mut self) -> Result<u8, StoreError> {
        Ok(self.take(1)?[0])
    }
    fn get_u32(&mut self) -> Result<u32, StoreError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn get_u64(&mut self) -> Result<u64, StoreError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn get_i64(&mut self) -> Result<i64, StoreError> {
        Ok(i64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn get_str(&mut self) -> Result<String, StoreError> {
        let len = self.get_u32()? as usize;
        if len > 1 << 24 {
            return Err(StoreError::Corrupt("unreasonable string length".into()));
        }
        let bytes = self.take(len)?;
        String::from_utf8(bytes.to_vec())
            .map_err(|_| StoreError::Corrupt("non-UTF-8 string".into()))
    }
}

// ---------------------------------------------------------------------------
// Write-ahead log
// ---------------------------------------------------------------------------

pub(super) struct WalWriter {
    file: BufWriter<File>,
}

impl WalWriter {
    pub(super) fn open_append(dir: &Path) -> Result<Self, StoreError> {
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(dir.join(WAL_NAME))?;
        Ok(WalWriter {
            file: BufWriter::new(file),
        })
    }

    pub(super) fn truncate(dir: &Path) -> Result<Self, StoreError> {
        let file = OpenOptions::new()
            .create(true)
            .write(true)
            .truncate(true)
            .open(dir.join(WAL_NAME))?;
        Ok(WalWriter {
            file: BufWriter::new(file),
        })
    }

    /// Append one batch worth of records followed by a commit marker, then
    /// flush. Called before the batch mutates any in-memory state.
    pub(super) fn append_batch(
        &mut self,
        entities: &[(String, String)],
        relations: &[String],
        facts: &[Triplet],
        removals: &[FactId],
    ) -> Result<(), StoreError> {
        let mut w = CountingWriter::new(&mut self.file);
        for (name, desc) in entities {
            w.put(&[TAG_ADD_ENTITY])?;
            w.put_str(name)?;
            w.put_str(desc)?;
        }
        for name in relations {
            w.put(&[TAG_ADD_RELATION])?;
            w.put_str(name)?;
        }
        for t in facts {
            w.put(&[TAG_ADD_FACT])?;
            w.put_u32(t.head.0)?;
            w.put_u32(t.relation.0)?;
            w.put_u32(t.tail.0)?;
            w.put_i64(t.timestamp_ms)?;
        }
        for f in removals {
            w.put(&[TAG_REMOVE_FACT])?;
            w.put_u32(f.0)?;
        }
        w.put(&[TAG_COMMIT])?;
        self.file.flush()?;
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Load path
// ---------------------------------------------------------------------------

/// Load persisted state from `dir` into a freshly built store: full snapshot
/// first (if present), then replay of the log tail.
pub(super) fn load_into(store: &KgStore, dir: &Path) -> Result<(), StoreError> {
    let snap_path = dir.join(SNAPSHOT_NAME);
    if snap_path.exists() {
        load_snapshot_file(store, &snap_path)?;
    }
    let wal_path = dir.join(WAL_NAME);
    if wal_path.exists() {
        replay_wal(store, &wal_path)?;
    }
    Ok(())
}

fn load_snapshot_file(store: &KgStore, path: &Path) -> Result<(), StoreError> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < 12 || &bytes[0..4] != SNAPSHOT_MAGIC {
        return Err(StoreError::Corrupt("bad snapshot magic".into()));
    }
    // Checksum covers everything before the trailing 8 bytes.
    let body = &bytes[..bytes.len() - 8];
    let stored_sum = u64::from_le_bytes(bytes[bytes.len() - 8..].try_into().unwrap());
    let mut h = Fnv64::new();
    h.update(body);
    if h.finish() != stored_sum {
        return Err(StoreError::Corrupt("snapshot checksum mismatch".into()));
    }

    let mut r = SliceReader::new(body);
    r.take(4)?; // magic
    let version = r.get_u32()?;
    if version != SNAPSHOT_VERSION {
        return Err(StoreError::Corrupt(format!(
            "unsupported snapshot version {version}"
        )));
    }
    let epoch = r.get_u64()?;
    let n_entities = r.get_u32()?;
    let n_relations = r.get_u32()?;
    let n_facts = r.get_u32()?;
    let stored_live = r.get_u64()?;

    let mut entities = Vec::with_capacity(n_entities as usize);
    for _ in 0..n_entities {
        let name = r.get_str()?;
        let desc = r.get_str()?;
        let added = r.get_u64()?;
        entities.push((name, desc, added));
    }
    let mut relations = Vec::with_capacity(n_relations as usize);
    for _ in 0..n_relations {
        let name = r.get_str()?;
        let added = r.get_u64()?;
        relations.push((name, added));
    }
    let mut facts = Vec::with_capacity(n_facts as usize);
    let mut live = 0u64;
    for _ in 0..n_facts {
        let head = r.get_u32()?;
        let relation = r.get_u32()?;
        let tail = r.get_u32()?;
        let timestamp_ms = r.get_i64()?;
        let added_epoch = r.get_u64()?;
        let removed_at = r.get_u64()?;
        if head >= n_entities || tail >= n_entities || relation >= n_relations {
            return Err(StoreError::Corrupt("fact references out of range".into()));
        }
        if removed_at == LIVE {
            live += 1;
        }
        facts.push(RawFact {
            head,
            relation,
            tail,
            timestamp_ms,
            added_epoch,
            removed_at,
        });
    }
    if r.remaining() != 0 {
        return Err(StoreError::Corrupt("trailing bytes in snapshot".into()));
    }
    if live != stored_live {
        return Err(StoreError::Corrupt("live fact count mismatch".into()));
    }
    raw::install_loaded(store, epoch, entities, relations, facts);
    Ok(())
}

/// Replay committed batches from the log; truncate any torn tail.
fn replay_wal(store: &KgStore, path: &Path) -> Result<(), StoreError> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    let mut r = SliceReader::new(&bytes);

    let mut entities: Vec<(String, String)> = Vec::new();
    let mut relations: Vec<String> = Vec::new();
    let mut facts: Vec<Triplet> = Vec::new();
    let mut removals: Vec<FactId> = Vec::new();
    let mut last_good = 0usize;

    loop {
        if r.remaining() == 0 {
            break;
        }
        let parsed: Result<bool, StoreError> = (|| {
            match r.get_u8()? {
                TAG_ADD_ENTITY => {
                    let name = r.get_str()?;
                    let desc = r.get_str()?;
                    entities.push((name, desc));
                    Ok(false)
                }
                TAG_ADD_RELATION => {
                    relations.push(r.get_str()?);
                    Ok(false)
                }
                TAG_ADD_FACT => {
                    let head = EntityId(r.get_u32()?);
                    let relation = RelationId(r.get_u32()?);
                    let tail = EntityId(r.get_u32()?);
                    let timestamp_ms = r.get_i64()?;
                    facts.push(Triplet {
                        head,
                        relation,
                        tail,
                        timestamp_ms,
                    });
                    Ok(false)
                }
                TAG_REMOVE_FACT => {
                    removals.push(FactId(r.get_u32()?));
                    Ok(false)
                }
                TAG_COMMIT => Ok(true),
                other => Err(StoreError::Corrupt(format!("unknown log tag {other}"))),
            }
        })();
        match parsed {
            Ok(true) => {
                raw::replay_batch(
                    store,
                    std::mem::take(&mut entities),
                    std::mem::take(&mut relations),
                    std::mem::take(&mut facts),
                    std::mem::take(&mut removals),
                )?;
                last_good = r.pos;
            }
            Ok(false) => {}
            // A torn record means the process died mid-append; everything up
            // to `last_good` already committed, the rest never did.
            Err(_) => break,
        }
    }

    if last_good < bytes.len() {
        let f = OpenOptions::new().write(true).open(path)?;
        f.set_len(last_good as u64)?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Snapshot files
// ---------------------------------------------------------------------------

fn serialize_state<W: Write>(
    store: &KgStore,
    st: &WriterState,
    sink: W,
) -> Result<(), StoreError> {
    let mut w = CountingWriter::new(sink);
    w.put(SNAPSHOT_MAGIC)?;
    w.put_u32(SNAPSHOT_VERSION)?;
    w.put_u64(st.epoch)?;
    w.put_u32(st.n_entities)?;
    w.put_u32(st.n_relations)?;
    w.put_u32(st.n_facts)?;
    w.put_u64(st.live_facts)?;
    for id in 0..st.n_entities {
        let (name, desc, added) = raw::entity(store, id);
        w.put_str(&name)?;
        w.put_str(&desc)?;
        w.put_u64(added)?;
    }
    for id in 0..st.n_relations {
        let (name, added) = raw::relation(store, id);
        w.put_str(&name)?;
        w.put_u64(added)?;
    }
    for id in 0..st.n_facts {
        let f = raw::fact(store, id);
        w.put_u32(f.head)?;
        w.put_u32(f.relation)?;
        w.put_u32(f.tail)?;
        w.put_i64(f.timestamp_ms)?;
        w.put_u64(f.added_epoch)?;
        w.put_u64(f.removed_at)?;
    }
    let sum = w.hash.finish();
    w.sink.write_all(&sum.to_le_bytes())?;
    w.sink.flush()?;
    Ok(())
}

/// Write the full state to `dir/snapshot.bin` via a temp file + rename.
pub(super) fn write_snapshot_file(
    store: &KgStore,
    st: &WriterState,
    dir: &Path,
) -> Result<(), StoreError> {
    let tmp: PathBuf = dir.join(format!("{SNAPSHOT_NAME}.tmp"));
    {
        let file = File::create(&tmp)?;
        serialize_state(store, st, BufWriter::new(file))?;
    }
    std::fs::rename(&tmp, dir.join(SNAPSHOT_NAME))?;
    Ok(())
}

/// Write the full state to an arbitrary path (used by tests and export).
pub(super) fn write_snapshot_bytes_to(
    store: &KgStore,
    st: &WriterState,
    path: &Path,
) -> Result<(), StoreError> {
    let file = File::create(path)?;
    serialize_state(store, st, BufWriter::new(file))
}
