//! The assembled engine: mutable graph store + rotational embeddings +
//! coarse text retrieval + sparse knowledge attention + decoder, behind a
//! small operational surface (ingest, update, query, train, evaluate,
//! export).
//!
//! Query path:
//!
//! ```text
//!   question ──► hashed text embedding ──► ANN seeds (top-N entities)
//!            ──► candidate subgraph (≤ M facts, provenance-tracked)
//!            ──► decoder lower layers → h_query → sparse attention → k_final
//!            ──► decoder upper layers + fusion ──► greedy answer tokens
//! ```
//!
//! Updates commit through the store's single-writer batch path; embedding
//! rows and the ANN index are refreshed immediately after the commit, and
//! periodic embedding retraining runs on a background thread so the update
//! path never blocks on it.

use crate::attention::{sparse_attention_forward, AttentionMode, AttnError};
use crate::config::Config;
use crate::data::{DataError, QaPair};
use crate::embed::{EmbedError, EmbedTrainConfig, EmbeddingStore};
use crate::eval::EvalReport;
use crate::ids::{EntityId, FactId, Triplet};
use crate::model::loss::{train_step, AdamState, TrainBatch, TrainExample, TrainingObjective};
use crate::model::tokenizer::{Tokenizer, ANSWER_SEP, EOS};
use crate::model::{DecoderConfig, Model, ModelError};
use crate::retrieval::{
    build_candidate_subgraph, embed_text, AnnIndex, AnnMode, AnnParams, RetrievalError,
};
use crate::store::{GraphSnapshot, KgStore, StoreError};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::fs;
use std::io::{BufRead, BufReader, Write as _};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::time::Instant;

#[derive(Debug, thiserror::Error)]
pub enum EngineError {
    #[error("store: {0}")]
    Store(#[from] StoreError),
    #[error("retrieval: {0}")]
    Retrieval(#[from] RetrievalError),
    #[error("attention: {0}")]
    Attention(#[from] AttnError),
    #[error("model: {0}")]
    Model(#[from] ModelError),
    #[error("embedding: {0}")]
    Embed(#[from] EmbedError),
    #[error("data: {0}")]
    Data(#[from] DataError),
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("engine not ready: {0}")]
    NotReady(String),
    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),
}

/// Per-query ablation and generation controls.
#[derive(Debug, Clone, Copy)]
pub struct QueryFlags {
    /// When false, skip retrieval and fusion entirely (knowledge-free pass).
    pub use_knowledge: bool,
    /// Attend over all candidates instead of the top-k subset.
    pub dense_attention: bool,
    /// Answer from the graph as of this epoch (static-knowledge ablation).
    pub static_kg_epoch: Option<u64>,
    /// Override the configured generation cap.
    pub max_new_tokens: Option<usize>,
}

impl Default for QueryFlags {
    fn default() -> Self {
        QueryFlags {
            use_knowledge: true,
            dense_attention: false,
            static_kg_epoch: None,
            max_new_tokens: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct QueryOutcome {
    pub answer: String,
    /// Facts the attention stage kept, with their weights (≤ k entries).
    pub selected: Vec<(FactId, f64)>,
    /// Coarse retrieval seeds with cosine scores.
    pub seeds: Vec<(EntityId, f64)>,
    pub retrieve_us: u64,
    pub attend_us: u64,
    pub generate_us: u64,
    /// Epoch the answering snapshot was taken at.
    pub epoch: u64,
}

#[derive(Debug, Clone, Copy)]
pub struct UpdateOutcome {
    pub fact_id: FactId,
    pub epoch: u64,
    /// Ingress-to-commit latency; excludes embedding/index refresh.
    pub latency_us: u64,
    pub created_entities: usize,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct IngestReport {
    pub entities_added: usize,
    pub relations_added: usize,
    pub facts_added: usize,
    pub duplicates: usize,
    pub elapsed_ms: u64,
    pub epoch: u64,
}

#[derive(Debug, Clone, Copy)]
pub struct SnapshotInfo {
    pub epoch: u64,
    pub entities: u32,
    pub relations: u32,
    pub live_facts: u64,
}

#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub alpha: f64,
    /// Candidate cap used when pre-computing per-question fact lists.
    pub train_max_candidates: usize,
    /// Knowledge-read drills per epoch, as a fraction of the question
    /// count: real question phrasings re-pointed at facts sampled fresh
    /// from the live table every epoch.
    pub read_drills: f64,
    /// Global-norm gradient clip (≤ 0 disables).
    pub grad_clip: f64,
    pub seed: u64,
    /// Print per-epoch progress to stderr.
    pub verbose: bool,
}

impl TrainOptions {
    pub fn from_config(cfg: &Config) -> Self {
        TrainOptions {
            epochs: cfg.train_epochs,
            batch_size: cfg.train_batch_size,
            lr: cfg.train_lr,
            alpha: cfg.alpha,
            train_max_candidates: cfg.max_candidates.min(256),
            read_drills: cfg.train_read_drills,
            grad_clip: 1.0,
            seed: cfg.seed,
            verbose: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub epoch_losses: Vec<TrainingObjective>,
    pub examples: usize,
    pub steps: u64,
}

#[derive(Default)]
struct RetrainWindow {
    min_ts: Option<i64>,
    max_ts: Option<i64>,
}

pub struct Engine {
    cfg: Config,
    store: KgStore,
    embeds: Arc<EmbeddingStore>,
    ann: AnnIndex,
    model: RwLock<Option<Model>>,
    tokenizer: RwLock<Option<Tokenizer>>,
    data_dir: Option<PathBuf>,
    updates_since_retrain: AtomicU64,
    retrain_busy: Arc<AtomicBool>,
    bulk_ingest: AtomicBool,
    retrain_window: Mutex<RetrainWindow>,
}

impl Engine {
    /// Fresh in-memory engine (no persistence directory).
    pub fn new(cfg: Config) -> Self {
        let ann = Self::build_ann(&cfg);
        Engine {
            embeds: Arc::new(EmbeddingStore::new(cfg.d_k, cfg.seed)),
            store: KgStore::new(),
            ann,
            model: RwLock::new(None),
            tokenizer: RwLock::new(None),
            data_dir: None,
            updates_since_retrain: AtomicU64::new(0),
            retrain_busy: Arc::new(AtomicBool::new(false)),
            bulk_ingest: AtomicBool::new(false),
            retrain_window: Mutex::new(RetrainWindow::default()),
            cfg,
        }
    }

    fn build_ann(cfg: &Config) -> AnnIndex {
        let mode = if cfg.ann_exact {
            AnnMode::Exact
        } else {
            AnnMode::GraphApproximate
        };
        let params = AnnParams {
            max_links: cfg.ann_max_links,
            ef_construction: cfg.ann_ef_construction,
            ef_search: cfg.ann_ef_search,
            ..AnnParams::default()
        };
        AnnIndex::new(mode, cfg.d_h, 0, params)
    }

    /// Open (or create) a persistent engine under `data_dir`:
    /// `store/` (snapshot + write-ahead log), `embed.ckpt`, `model.ckpt`,
    /// `vocab.txt`. The ANN index is rebuilt from entity descriptions.
    pub fn open(data_dir: &Path, cfg: Config) -> Result<Self, EngineError> {
        fs::create_dir_all(data_dir)?;
        let store = KgStore::open(&data_dir.join("store"))?;
        let embed_path = data_dir.join("embed.ckpt");
        let embeds = if embed_path.exists() {
            let loaded = EmbeddingStore::load(&embed_path, cfg.seed)?;
            if loaded.d_k() != cfg.d_k {
                return Err(EngineError::NotReady(format!(
                    "embedding checkpoint at {} has d_k {} but the config says {}; \
                     use the config the data directory was created with",
                    embed_path.display(),
                    loaded.d_k(),
                    cfg.d_k
                )));
            }
            Arc::new(loaded)
        } else {
            Arc::new(EmbeddingStore::new(cfg.d_k, cfg.seed))
        };
        let model_path = data_dir.join("model.ckpt");
        let model = if model_path.exists() {
            Some(Model::load(&model_path)?)
        } else {
            None
        };
        let vocab_path = data_dir.join("vocab.txt");
        let tokenizer = if vocab_path.exists() {
            Some(Tokenizer::load(&vocab_path)?)
        } else {
            None
        };

        let engine = Engine {
            ann: Self::build_ann(&cfg),
            embeds,
            store,
            model: RwLock::new(model),
            tokenizer: RwLock::new(tokenizer),
            data_dir: Some(data_dir.to_path_buf()),
            updates_since_retrain: AtomicU64::new(0),
            retrain_busy: Arc::new(AtomicBool::new(false)),
            bulk_ingest: AtomicBool::new(false),
            retrain_window: Mutex::new(RetrainWindow::default()),
            cfg,
        };
        engine.rebuild_ann()?;
        engine.embeds.init_missing_from(&engine.store.snapshot());
        engine.rebuild_lifted_rows()?;
        Ok(engine)
    }

    /// Persist model/embedding/vocabulary artifacts (the store persists
    /// itself through its log; this also compacts it when dir-backed).
    pub fn save_artifacts(&self) -> Result<(), EngineError> {
        let dir = self
            .data_dir
            .clone()
            .ok_or_else(|| EngineError::NotReady("engine has no data directory".into()))?;
        self.embeds.save(&dir.join("embed.ckpt"))?;
        if let Some(m) = self.model.read().expect("model lock").as_ref() {
            m.save(&dir.join("model.ckpt"))?;
        }
        if let Some(t) = self.tokenizer.read().expect("tokenizer lock").as_ref() {
            t.save(&dir.join("vocab.txt"))?;
        }
        self.store.compact()?;
        Ok(())
    }

    pub fn config(&self) -> &Config {
        &self.cfg
    }

    pub fn store(&self) -> &KgStore {
        &self.store
    }

    pub fn embeddings(&self) -> &EmbeddingStore {
        &self.embeds
    }

    pub fn ann(&self) -> &AnnIndex {
        &self.ann
    }

    pub fn has_model(&self) -> bool {
        self.model.read().expect("model lock").is_some()
    }

    pub fn snapshot_info(&self) -> SnapshotInfo {
        let s = self.store.snapshot();
        SnapshotInfo {
            epoch: s.epoch(),
            entities: s.entity_count(),
            relations: s.relation_count(),
            live_facts: s.live_fact_count(),
        }
    }

    fn rebuild_ann(&self) -> Result<(), EngineError> {
        let snap = self.store.snapshot();
        for i in 0..snap.entity_count() {
            let id = EntityId(i);
            if let Some(e) = snap.entity(id) {
                let emb = embed_text(e.description(), self.cfg.d_h)?;
                self.ann.insert(id, &emb)?;
            }
        }
        Ok(())
    }

    // -- ingest / export ------------------------------------------------

    /// Load an entity description file (`name \t description`). One commit
    /// per file; duplicate names are counted and skipped.
    pub fn ingest_entities_file(&self, path: &Path) -> Result<IngestReport, EngineError> {
        let started = Instant::now();
        self.bulk_ingest.store(true, Ordering::SeqCst);
        let result = self.ingest_entities_inner(path);
        self.bulk_ingest.store(false, Ordering::SeqCst);
        let mut report = result?;
        report.elapsed_ms = started.elapsed().as_millis() as u64;
        report.epoch = self.store.snapshot().epoch();
        Ok(report)
    }

    fn ingest_entities_inner(&self, path: &Path) -> Result<IngestReport, EngineError> {
        let mut rows: Vec<(String, String)> = Vec::new();
        let reader = BufReader::new(fs::File::open(path)?);
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (name, desc) = line.split_once('\t').ok_or(EngineError::Parse {
                line: i + 1,
                msg: "expected `name<TAB>description`".into(),
            })?;
            rows.push((name.to_string(), desc.to_string()));
        }
        let mut report = IngestReport::default();
        let mut added: Vec<EntityId> = Vec::new();
        if !rows.is_empty() {
            self.store.batch(|b| {
                for (name, desc) in &rows {
                    if b.lookup_entity(name).is_some() {
                        report.duplicates += 1;
                    } else {
                        added.push(b.add_entity(name, desc)?);
                        report.entities_added += 1;
                    }
                }
                Ok(())
            })?;
        }
        let snap = self.store.snapshot();
        for id in added {
            let e = snap.entity(id).expect("just committed");
            self.ann.insert(id, &embed_text(e.description(), self.cfg.d_h)?)?;
        }
        Ok(report)
    }

    /// Load a fact file (`head \t relation \t tail \t timestamp_ms`). One
    /// commit per file (one epoch); missing entities/relations are created
    /// with the name as description; duplicate live triplets are counted
    /// and skipped. Embedding rows and the ANN index are refreshed after
    /// the commit.
    pub fn ingest_facts_file(&self, path: &Path) -> Result<IngestReport, EngineError> {
        let started = Instant::now();
        self.bulk_ingest.store(true, Ordering::SeqCst);
        let result = self.ingest_facts_inner(path);
        self.bulk_ingest.store(false, Ordering::SeqCst);
        let mut report = result?;
        report.elapsed_ms = started.elapsed().as_millis() as u64;
        report.epoch = self.store.snapshot().epoch();
        Ok(report)
    }

    fn ingest_facts_inner(&self, path: &Path) -> Result<IngestReport, EngineError> {
        let mut rows: Vec<(String, String, String, i64)> = Vec::new();
        let reader = BufReader::new(fs::File::open(path)?);
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            let lineno = i + 1;
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let parts: Vec<&str> = line.split('\t').collect();
            if parts.len() != 4 {
                return Err(EngineError::Parse {
                    line: lineno,
                    msg: format!("expected 4 tab-separated fields, got {}", parts.len()),
                });
            }
            let ts = parts[3].parse().map_err(|e| EngineError::Parse {
                line: lineno,
                msg: format!("bad timestamp: {e}"),
            })?;
            rows.push((
                parts[0].to_string(),
                parts[1].to_string(),
                parts[2].to_string(),
                ts,
            ));
        }
        let mut report = IngestReport::default();
        let mut new_entities: Vec<EntityId> = Vec::new();
        if !rows.is_empty() {
            self.store.batch(|b| {
                for (head, rel, tail, ts) in &rows {
                    let h = match b.lookup_entity(head) {
                        Some(id) => id,
                        None => {
                            let id = b.add_entity(head, head)?;
                            new_entities.push(id);
                            report.entities_added += 1;
                            id
                        }
                    };
                    let t = match b.lookup_entity(tail) {
                        Some(id) => id,
                        None => {
                            let id = b.add_entity(tail, tail)?;
                            new_entities.push(id);
                            report.entities_added += 1;
                            id
                        }
                    };
                    let r = match b.lookup_relation(rel) {
                        Some(id) => id,
                        None => {
                            report.relations_added += 1;
                            b.add_relation(rel)?
                        }
                    };
                    match b.add_fact(h, r, t, *ts) {
                        Ok(_) => report.facts_added += 1,
                        Err(StoreError::DuplicateFact(..)) => report.duplicates += 1,
                        Err(e) => return Err(e),
                    }
                }
                Ok(())
            })?;
        }
        let snap = self.store.snapshot();
        for fact_id in self.store.drain_embed_queue() {
            if let Some(t) = snap.fact(fact_id) {
                self.embeds.init_for_fact(&t);
            }
        }
        for id in new_entities {
            let e = snap.entity(id).expect("just committed");
            self.ann.insert(id, &embed_text(e.description(), self.cfg.d_h)?)?;
        }
        Ok(report)
    }

    /// Write the live graph as the same TSV formats ingest reads
    /// (deterministic: id order).
    pub fn export_tsv(&self, entities_path: &Path, facts_path: &Path) -> Result<(), EngineError> {
        let snap = self.store.snapshot();
        let mut ents = String::new();
        for i in 0..snap.entity_count() {
            if let Some(e) = snap.entity(EntityId(i)) {
                ents.push_str(&format!("{}\t{}\n", e.name(), e.description()));
            }
        }
        let mut facts = String::new();
        for (_, t) in snap.live_facts() {
            let head = snap.entity(t.head).expect("live fact head").name().to_string();
            let tail = snap.entity(t.tail).expect("live fact tail").name().to_string();
            let rel = snap.relation_name(t.relation).expect("live fact relation");
            facts.push_str(&format!("{head}\t{rel}\t{tail}\t{}\n", t.timestamp_ms));
        }
        let mut fe = fs::File::create(entities_path)?;
        fe.write_all(ents.as_bytes())?;
        let mut ff = fs::File::create(facts_path)?;
        ff.write_all(facts.as_bytes())?;
        Ok(())
    }

    // -- live updates -----------------------------------------------------

    /// Commit one new fact, creating named entities/relations as needed.
    /// The reported latency covers ingress to durable commit; embedding-row
    /// initialization and index insertion happen right after (synchronously,
    /// so the fact is retrievable once this returns), and periodic
    /// embedding retraining runs on a background thread.
    pub fn update(
        &self,
        head: &str,
        relation: &str,
        tail: &str,
        timestamp_ms: i64,
        head_description: Option<&str>,
        tail_description: Option<&str>,
    ) -> Result<UpdateOutcome, EngineError> {
        let started = Instant::now();
        let mut new_entities: Vec<EntityId> = Vec::new();
        let fact_id = self.store.batch(|b| {
            let h = match b.lookup_entity(head) {
                Some(id) => id,
                None => {
                    let id = b.add_entity(head, head_description.unwrap_or(head))?;
                    new_entities.push(id);
                    id
                }
            };
            let t = match b.lookup_entity(tail) {
                Some(id) => id,
                None => {
                    let id = b.add_entity(tail, tail_description.unwrap_or(tail))?;
                    new_entities.push(id);
                    id
                }
            };
            let r = match b.lookup_relation(relation) {
                Some(id) => id,
                None => b.add_relation(relation)?,
            };
            b.add_fact(h, r, t, timestamp_ms)
        })?;
        let latency_us = started.elapsed().as_micros() as u64;
        let snap = self.store.snapshot();

        for id in self.store.drain_embed_queue() {
            if let Some(t) = snap.fact(id) {
                self.embeds.init_for_fact(&t);
            }
        }
        for id in &new_entities {
            let e = snap.entity(*id).expect("just committed");
            self.ann.insert(*id, &embed_text(e.description(), self.cfg.d_h)?)?;
        }
        {
            let mut w = self.retrain_window.lock().expect("retrain window lock");
            w.min_ts = Some(w.min_ts.map_or(timestamp_ms, |m| m.min(timestamp_ms)));
            w.max_ts = Some(w.max_ts.map_or(timestamp_ms, |m| m.max(timestamp_ms)));
        }
        self.maybe_retrain(&snap);

        Ok(UpdateOutcome {
            fact_id,
            epoch: snap.epoch(),
            latency_us,
            created_entities: new_entities.len(),
        })
    }

    /// Kick off background embedding retraining when the cadence is due.
    /// Skipped during bulk ingest and while a previous run is in flight.
    fn maybe_retrain(&self, snap: &GraphSnapshot) {
        let cadence = self.cfg.retrain_cadence;
        if cadence == 0 || self.bulk_ingest.load(Ordering::SeqCst) {
            return;
        }
        let n = self.updates_since_retrain.fetch_add(1, Ordering::SeqCst) + 1;
        if n % cadence != 0 {
            return;
        }
        if self
            .retrain_busy
            .compare_exchange(false, true, Ordering::SeqCst, Ordering::SeqCst)
            .is_err()
        {
            return;
        }
        let window = {
            let mut w = self.retrain_window.lock().expect("retrain window lock");
            let win = (w.min_ts.unwrap_or(i64::MIN), w.max_ts.unwrap_or(i64::MAX));
            *w = RetrainWindow::default();
            win
        };
        let embeds = Arc::clone(&self.embeds);
        let busy = Arc::clone(&self.retrain_busy);
        let snap = snap.clone();
        let train_cfg = EmbedTrainConfig {
            margin: self.cfg.embed_margin,
            negatives_per_positive: self.cfg.embed_negatives,
            learning_rate: self.cfg.embed_lr,
            steps_per_retrain: self.cfg.embed_steps,
            adversarial_temperature: self.cfg.embed_adv_temperature,
        };
        let seed = self.cfg.seed.wrapping_add(n);
        std::thread::spawn(move || {
            // Best-effort: an empty window or tiny graph is simply skipped.
            let _ = embeds.retrain(&snap, &train_cfg, window, seed);
            busy.store(false, Ordering::SeqCst);
        });
    }

    // -- query --------------------------------------------------------------

    /// Answer a question with the trained model under the given flags.
    pub fn query(&self, question: &str, flags: &QueryFlags) -> Result<QueryOutcome, EngineError> {
        let model_guard = self.model.read().expect("model lock");
        let model = model_guard
            .as_ref()
            .ok_or_else(|| EngineError::NotReady("no trained model loaded".into()))?;
        let tok_guard = self.tokenizer.read().expect("tokenizer lock");
        let tokenizer = tok_guard
            .as_ref()
            .ok_or_else(|| EngineError::NotReady("no vocabulary loaded".into()))?;

        let snapshot = match flags.static_kg_epoch {
            Some(e) => self.store.snapshot_at(e)?,
            None => self.store.snapshot(),
        };

        let mut prompt = tokenizer.encode(question);
        prompt.push(ANSWER_SEP);

        // Coarse retrieval.
        let retrieve_started = Instant::now();
        let (seeds, candidates) = if flags.use_knowledge {
            self.retrieve_candidates(question, &snapshot)?
        } else {
            (Vec::new(), Vec::new())
        };
        let retrieve_us = retrieve_started.elapsed().as_micros() as u64;

        // Attention runs once on the prompt, inside the staged forward.
        let mode = if flags.dense_attention {
            AttentionMode::Dense
        } else {
            AttentionMode::Sparse { k: self.cfg.k }
        };
        let mut attend_us = 0u64;
        let mut selected: Vec<(FactId, f64)> = Vec::new();
        let mut attn_err: Option<AttnError> = None;
        let mut k_final: Option<Vec<f64>> = None;
        let out = model.forward_staged(&prompt, prompt.len(), |q| {
            if candidates.is_empty() {
                return None;
            }
            let t0 = Instant::now();
            match sparse_attention_forward(
                q,
                &snapshot,
                &candidates,
                &self.embeds,
                &model.params.attn,
                mode,
            ) {
                Ok((result, _cache)) => {
                    attend_us = t0.elapsed().as_micros() as u64;
                    selected = result
                        .selected
                        .iter()
                        .copied()
                        .zip(result.weights.iter().copied())
                        .collect();
                    // Dense mode keeps every candidate; report only the
                    // strongest k so responses stay bounded.
                    if selected.len() > self.cfg.k {
                        selected.sort_by(|a, b| {
                            b.1.total_cmp(&a.1).then_with(|| a.0 .0.cmp(&b.0 .0))
                        });
                        selected.truncate(self.cfg.k);
                    }
                    k_final = Some(result.k_final.clone());
                    k_final.clone()
                }
                Err(e) => {
                    attn_err = Some(e);
                    None
                }
            }
        })?;
        if let Some(e) = attn_err {
            return Err(e.into());
        }
        drop(out);

        let generate_started = Instant::now();
        let max_new = flags.max_new_tokens.unwrap_or(self.cfg.max_new_tokens);
        let seq = model.generate_greedy(&prompt, k_final.as_deref(), max_new, EOS)?;
        let generate_us = generate_started.elapsed().as_micros() as u64;
        let answer = tokenizer.decode(&seq[prompt.len()..]);

        Ok(QueryOutcome {
            answer,
            selected,
            seeds,
            retrieve_us,
            attend_us,
            generate_us,
            epoch: snapshot.epoch(),
        })
    }

    /// Candidate facts the retrieval stage would hand to knowledge
    /// attention for this question, against the current snapshot. Lets
    /// callers separate "never retrieved" from "retrieved but not
    /// selected" when they diagnose a wrong answer.
    pub fn candidates_for(&self, question: &str) -> Result<Vec<FactId>, EngineError> {
        let snapshot = self.store.snapshot();
        let (_, candidates) = self.retrieve_candidates(question, &snapshot)?;
        Ok(candidates)
    }

    /// Text → ANN seeds → candidate facts, against a specific snapshot.
    /// Seeds pointing at entities newer than the snapshot are dropped.
    fn retrieve_candidates(
        &self,
        question: &str,
        snapshot: &GraphSnapshot,
    ) -> Result<(Vec<(EntityId, f64)>, Vec<FactId>), EngineError> {
        if self.ann.indexed_count() == 0 {
            return Ok((Vec::new(), Vec::new()));
        }
        let q = embed_text(question, self.cfg.d_h)?;
        let mut seeds = self.ann.search(&q, self.cfg.coarse_n)?;
        seeds.retain(|(id, _)| snapshot.entity(*id).is_some());
        if seeds.is_empty() {
            return Ok((Vec::new(), Vec::new()));
        }
        let subgraph = build_candidate_subgraph(
            snapshot,
            &seeds,
            self.cfg.subgraph_hops,
            self.cfg.max_candidates,
        )?;
        Ok((seeds, subgraph.facts))
    }

    // -- training ---------------------------------------------------------

    /// Build the tokenizer, lift entity embeddings into the vocabulary,
    /// pre-compute candidates per question, and fit the decoder.
    ///
    /// The vocabulary covers the training text plus every entity and
    /// relation name in the store, so facts added after training stay
    /// decodable.
    pub fn train(&self, qa: &[QaPair], opts: &TrainOptions) -> Result<TrainSummary, EngineError> {
        let snapshot = self.store.snapshot();
        let mut corpus: Vec<String> = Vec::new();
        for pair in qa {
            corpus.push(pair.question.clone());
            corpus.push(pair.answer.clone());
        }
        for i in 0..snapshot.entity_count() {
            if let Some(e) = snapshot.entity(EntityId(i)) {
                corpus.push(e.name().to_string());
            }
        }
        for i in 0..snapshot.relation_count() {
            if let Some(name) = snapshot.relation_name(crate::ids::RelationId(i)) {
                corpus.push(name);
            }
        }
        let tokenizer = Tokenizer::from_corpus(corpus.iter().map(|s| s.as_str()));
        let config = DecoderConfig {
            vocab_size: tokenizer.vocab_size(),
            d_model: self.cfg.d_model,
            n_layers: self.cfg.n_layers,
            n_heads: self.cfg.n_heads,
            d_ffn: self.cfg.d_ffn,
            max_seq_len: self.cfg.max_seq_len,
            fusion_layers: self.cfg.fusion_layers.clone(),
            d_k: self.cfg.d_k,
            attn_d_proj: self.cfg.attn_d_proj,
            attn_n_heads: self.cfg.attn_n_heads,
            seed: opts.seed,
        };
        let mut model = Model::new(config)?;
        // Entities with no fact yet (future update targets) still need
        // embedding rows so their vocabulary tokens can be lifted.
        for i in 0..snapshot.entity_count() {
            self.embeds.ensure_entity_row(EntityId(i));
        }
        Self::lift_entity_rows(&mut model, &tokenizer, &snapshot, &self.embeds)?;

        let examples = self.build_examples(&tokenizer, &snapshot, qa, opts.train_max_candidates)?;
        let n_examples = examples.len();
        if n_examples == 0 {
            return Err(EngineError::NotReady("no training examples".into()));
        }

        // Knowledge-read drills: recombine the phrasing of real training
        // questions with facts sampled fresh from the whole table every
        // epoch. A question set of fixed size is eventually memorized, and
        // from then on the loss no longer rewards reading the retrieved
        // fact; the question×fact cross product is too large to memorize,
        // so drills keep both the selection scores and the read-off
        // through the fusion pathway under pressure for the entire run.
        let templates: Vec<(Vec<String>, String, String)> = if opts.read_drills > 0.0 {
            qa.iter()
                .filter_map(|pair| {
                    let t = snapshot.fact(FactId(pair.gold_fact))?;
                    let head = snapshot.entity(t.head)?.name().to_string();
                    let relation = snapshot.relation_name(t.relation)?;
                    let words: Vec<String> =
                        pair.question.split_whitespace().map(str::to_string).collect();
                    // Only phrasings that name the fact verbatim can be
                    // re-pointed at another fact by token substitution.
                    (words.iter().any(|w| *w == head) && words.iter().any(|w| *w == relation))
                        .then_some((words, head, relation))
                })
                .collect()
        } else {
            Vec::new()
        };
        let drill_pool: Vec<(FactId, Triplet)> = if templates.is_empty() {
            Vec::new()
        } else {
            snapshot.live_facts().collect()
        };
        let n_drills = if drill_pool.is_empty() {
            0
        } else {
            (opts.read_drills * n_examples as f64).ceil() as usize
        };

        let mut adam = AdamState::new(opts.lr);
        adam.clip = (opts.grad_clip > 0.0).then_some(opts.grad_clip);
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x7472_6169);
        let mode = AttentionMode::Sparse { k: self.cfg.k };
        let mut epoch_losses = Vec::with_capacity(opts.epochs);
        let mut steps = 0u64;
        for epoch in 0..opts.epochs {
            let drills: Vec<TrainExample> = (0..n_drills)
                .filter_map(|_| {
                    let (words, head, relation) =
                        &templates[rng.random_range(0..templates.len())];
                    let (fid, t) = &drill_pool[rng.random_range(0..drill_pool.len())];
                    let new_head = snapshot.entity(t.head)?.name().to_string();
                    let new_relation = snapshot.relation_name(t.relation)?;
                    let answer = snapshot.entity(t.tail)?.name().to_string();
                    let question = words
                        .iter()
                        .map(|w| {
                            if w == head {
                                new_head.as_str()
                            } else if w == relation {
                                new_relation.as_str()
                            } else {
                                w.as_str()
                            }
                        })
                        .collect::<Vec<_>>()
                        .join(" ");
                    let mut tokens = tokenizer.encode(&question);
                    tokens.push(ANSWER_SEP);
                    tokens.extend(tokenizer.encode(&answer));
                    tokens.push(EOS);
                    if tokens.len() > self.cfg.max_seq_len {
                        return None;
                    }
                    let (_, mut candidates) =
                        self.retrieve_candidates(&question, &snapshot).ok()?;
                    candidates.truncate(opts.train_max_candidates);
                    let gold = match candidates.iter().position(|f| f == fid) {
                        Some(i) => i,
                        None => {
                            if candidates.len() >= opts.train_max_candidates {
                                candidates.pop();
                            }
                            candidates.push(*fid);
                            candidates.len() - 1
                        }
                    };
                    Some(TrainExample {
                        tokens,
                        candidates,
                        gold: Some(gold),
                    })
                })
                .collect();
            let mut order: Vec<usize> = (0..n_examples + drills.len()).collect();
            order.shuffle(&mut rng);
            let mut lm_sum = 0.0;
            let mut aux_sum = 0.0;
            let mut aux_n = 0usize;
            let mut total_sum = 0.0;
            let mut batches = 0usize;
            for chunk in order.chunks(opts.batch_size.max(1)) {
                let batch = TrainBatch {
                    examples: chunk
                        .iter()
                        .map(|&i| {
                            if i < n_examples {
                                examples[i].clone()
                            } else {
                                drills[i - n_examples].clone()
                            }
                        })
                        .collect(),
                };
                let obj = train_step(
                    &mut model,
                    &snapshot,
                    &self.embeds,
                    &batch,
                    opts.alpha,
                    mode,
                    &mut adam,
                )?;
                lm_sum += obj.lm_loss;
                if let Some(a) = obj.aux_loss {
                    aux_sum += a;
                    aux_n += 1;
                }
                total_sum += obj.total_loss;
                batches += 1;
                steps += 1;
            }
            let epoch_obj = TrainingObjective {
                alpha: opts.alpha,
                lm_loss: lm_sum / batches as f64,
                aux_loss: (aux_n > 0).then(|| aux_sum / aux_n as f64),
                total_loss: total_sum / batches as f64,
            };
            if opts.verbose {
                eprintln!(
                    "epoch {epoch}: lm {:.4} aux {:?} total {:.4}",
                    epoch_obj.lm_loss, epoch_obj.aux_loss, epoch_obj.total_loss
                );
            }
            epoch_losses.push(epoch_obj);
        }

        *self.model.write().expect("model lock") = Some(model);
        *self.tokenizer.write().expect("tokenizer lock") = Some(tokenizer);
        Ok(TrainSummary {
            epoch_losses,
            examples: n_examples,
            steps,
        })
    }

    /// Entity-name tokens read their input/output embedding straight from
    /// the graph table: identity when 2·d_k == d_model, otherwise through a
    /// fixed seeded projection. These rows receive no decoder gradient, so
    /// a later graph update changes what the token means without retraining.
    fn lift_entity_rows(
        model: &mut Model,
        tokenizer: &Tokenizer,
        snapshot: &GraphSnapshot,
        embeds: &EmbeddingStore,
    ) -> Result<(), EngineError> {
        let d_model = model.config.d_model;
        let d_row = 2 * model.config.d_k;
        let projection: Option<Vec<Vec<f64>>> = if d_row == d_model {
            None
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(model.config.seed ^ 0x4c49_4654);
            let limit = (6.0 / (d_row + d_model) as f64).sqrt();
            Some(
                (0..d_model)
                    .map(|_| (0..d_row).map(|_| rng.random_range(-limit..limit)).collect())
                    .collect(),
            )
        };
        let mut by_name: std::collections::HashMap<String, EntityId> = std::collections::HashMap::new();
        for i in 0..snapshot.entity_count() {
            if let Some(e) = snapshot.entity(EntityId(i)) {
                by_name.insert(e.name().to_string(), EntityId(i));
            }
        }
        for tok in 0..tokenizer.vocab_size() as u32 {
            let Some(name) = tokenizer.token(tok) else {
                continue;
            };
            let Some(&entity) = by_name.get(name) else {
                continue;
            };
            let Some(row) = embeds.entity_row(entity) else {
                continue;
            };
            let lifted = match &projection {
                None => row,
                Some(p) => p
                    .iter()
                    .map(|prow| prow.iter().zip(&row).map(|(a, b)| a * b).sum())
                    .collect(),
            };
            model.set_lifted_row(tok, lifted)?;
        }
        Ok(())
    }

    /// Refresh lifted vocabulary rows from the current embedding tables
    /// (after background retraining, for example).
    pub fn rebuild_lifted_rows(&self) -> Result<(), EngineError> {
        let mut model_guard = self.model.write().expect("model lock");
        let tok_guard = self.tokenizer.read().expect("tokenizer lock");
        if let (Some(model), Some(tokenizer)) = (model_guard.as_mut(), tok_guard.as_ref()) {
            let snapshot = self.store.snapshot();
            Self::lift_entity_rows(model, tokenizer, &snapshot, &self.embeds)?;
        }
        Ok(())
    }

    fn build_examples(
        &self,
        tokenizer: &Tokenizer,
        snapshot: &GraphSnapshot,
        qa: &[QaPair],
        cap: usize,
    ) -> Result<Vec<TrainExample>, EngineError> {
        let mut examples = Vec::with_capacity(qa.len());
        for pair in qa {
            let mut tokens = tokenizer.encode(&pair.question);
            tokens.push(ANSWER_SEP);
            tokens.extend(tokenizer.encode(&pair.answer));
            tokens.push(EOS);

            let (_, mut candidates) = self.retrieve_candidates(&pair.question, snapshot)?;
            candidates.truncate(cap);
            let gold_fact = FactId(pair.gold_fact);
            let gold = match candidates.iter().position(|&f| f == gold_fact) {
                Some(i) => Some(i),
                None if snapshot.fact(gold_fact).is_some() => {
                    // Teacher-forced: make sure the answering fact is in
                    // the candidate set during training.
                    if candidates.len() >= cap {
                        candidates.pop();
                    }
                    candidates.push(gold_fact);
                    Some(candidates.len() - 1)
                }
                None => None,
            };
            examples.push(TrainExample {
                tokens,
                candidates,
                gold,
            });
        }
        Ok(examples)
    }

    /// Attach an already-trained model + vocabulary (checkpoint restore).
    pub fn install_model(&self, model: Model, tokenizer: Tokenizer) {
        *self.model.write().expect("model lock") = Some(model);
        *self.tokenizer.write().expect("tokenizer lock") = Some(tokenizer);
    }

    /// Run the model over a QA list and score it.
    pub fn evaluate(
        &self,
        qa: &[QaPair],
        split: &str,
        flags: &QueryFlags,
    ) -> Result<EvalReport, EngineError> {
        let mut rows: Vec<(String, String, String)> = Vec::with_capacity(qa.len());
        for pair in qa {
            let outcome = self.query(&pair.question, flags)?;
            rows.push((pair.question.clone(), pair.answer.clone(), outcome.answer));
        }
        Ok(EvalReport::from_pairs(
            split,
            rows.iter().map(|(q, g, p)| (q.as_str(), g.as_str(), p.as_str())),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{SyntheticConfig, SyntheticDataset};
    use tempfile::tempdir;

    fn tiny_config() -> Config {
        let mut cfg = Config::default();
        cfg.d_h = 64;
        cfg.d_k = 16; // 2·d_k == d_model → identity entity-row lift
        cfg.d_model = 32;
        cfg.n_layers = 2;
        cfg.n_heads = 2;
        cfg.d_ffn = 64;
        cfg.fusion_layers = vec![1];
        cfg.attn_d_proj = 16;
        cfg.attn_n_heads = 2;
        cfg.coarse_n = 10;
        cfg.max_candidates = 64;
        cfg.retrain_cadence = 0;
        cfg.max_new_tokens = 6;
        cfg
    }

    fn tiny_dataset() -> SyntheticDataset {
        SyntheticDataset::generate(&SyntheticConfig {
            seed: 11,
            n_entities: 30,
            n_relations: 4,
            n_facts: 60,
            n_qa: 24,
            unseen_fraction: 0.25,
            n_two_hop: 0,
            ..SyntheticConfig::default()
        })
        .expect("tiny dataset")
    }

    /// Ingest both fact files in order and confirm the file-position ↔
    /// FactId contract the QA gold labels rely on.
    #[test]
    fn ingest_assigns_fact_ids_in_file_order() {
        let dir = tempdir().unwrap();
        let data = tiny_dataset();
        data.write_files(dir.path()).unwrap();
        let engine = Engine::new(tiny_config());

        let r1 = engine.ingest_entities_file(&dir.path().join("entities.tsv")).unwrap();
        assert_eq!(r1.entities_added, data.entities.len());
        assert_eq!(r1.duplicates, 0);

        let r2 = engine.ingest_facts_file(&dir.path().join("facts_seen.tsv")).unwrap();
        let r3 = engine.ingest_facts_file(&dir.path().join("facts_unseen.tsv")).unwrap();
        assert_eq!(r2.facts_added + r3.facts_added, data.facts.len());
        assert_eq!(r2.entities_added + r3.entities_added, 0, "entities file covered all names");
        assert_eq!(r2.duplicates + r3.duplicates, 0);

        let snap = engine.store().snapshot();
        for qa in data.qa_seen.iter().chain(&data.qa_unseen) {
            let t = snap
                .fact(FactId(qa.gold_fact))
                .expect("gold fact id resolves");
            let tail = snap.entity(t.tail).unwrap();
            assert_eq!(tail.name(), qa.answer, "gold fact's tail answers the question");
        }
        // Every committed fact got an embedding row and every entity an ANN entry.
        assert_eq!(engine.ann().indexed_count(), data.entities.len());
        for (_, t) in snap.live_facts() {
            assert!(engine.embeddings().has_entity_row(t.head));
            assert!(engine.embeddings().has_relation_row(t.relation));
        }
    }

    #[test]
    fn reingesting_a_fact_file_counts_duplicates() {
        let dir = tempdir().unwrap();
        let data = tiny_dataset();
        data.write_files(dir.path()).unwrap();
        let engine = Engine::new(tiny_config());
        let first = engine.ingest_facts_file(&dir.path().join("facts_seen.tsv")).unwrap();
        assert!(first.facts_added > 0);
        let again = engine.ingest_facts_file(&dir.path().join("facts_seen.tsv")).unwrap();
        assert_eq!(again.facts_added, 0);
        assert_eq!(again.duplicates, first.facts_added);
        assert_eq!(
            engine.store().snapshot().live_fact_count(),
            first.facts_added as u64
        );
    }

    #[test]
    fn export_is_byte_stable_across_a_round_trip() {
        let dir = tempdir().unwrap();
        let data = tiny_dataset();
        data.write_files(dir.path()).unwrap();
        let engine = Engine::new(tiny_config());
        engine.ingest_entities_file(&dir.path().join("entities.tsv")).unwrap();
        engine.ingest_facts_file(&dir.path().join("facts_seen.tsv")).unwrap();
        engine.ingest_facts_file(&dir.path().join("facts_unseen.tsv")).unwrap();

        let e1 = dir.path().join("out_entities.tsv");
        let f1 = dir.path().join("out_facts.tsv");
        engine.export_tsv(&e1, &f1).unwrap();

        let engine2 = Engine::new(tiny_config());
        engine2.ingest_entities_file(&e1).unwrap();
        engine2.ingest_facts_file(&f1).unwrap();
        let e2 = dir.path().join("out_entities2.tsv");
        let f2 = dir.path().join("out_facts2.tsv");
        engine2.export_tsv(&e2, &f2).unwrap();

        assert_eq!(fs::read(&e1).unwrap(), fs::read(&e2).unwrap());
        assert_eq!(fs::read(&f1).unwrap(), fs::read(&f2).unwrap());
    }

    #[test]
    fn update_commits_indexes_and_rejects_duplicates() {
        let engine = Engine::new(tiny_config());
        let out = engine
            .update("alice", "works_at", "acme corp", 1_000, None, Some("a company"))
            .unwrap();
        assert_eq!(out.created_entities, 2);
        let snap = engine.store().snapshot();
        let t = snap.fact(out.fact_id).expect("committed");
        assert_eq!(snap.entity(t.head).unwrap().name(), "alice");
        assert_eq!(snap.entity(t.tail).unwrap().description(), "a company");
        assert!(engine.embeddings().has_entity_row(t.head));
        assert!(engine.ann().contains(t.head) && engine.ann().contains(t.tail));

        let dup = engine.update("alice", "works_at", "acme corp", 2_000, None, None);
        assert!(matches!(
            dup,
            Err(EngineError::Store(StoreError::DuplicateFact(..)))
        ));
        // The failed batch must not have committed anything.
        assert_eq!(engine.store().snapshot().epoch(), out.epoch);
    }

    #[test]
    fn update_cadence_triggers_background_embedding_retrain() {
        let mut cfg = tiny_config();
        cfg.retrain_cadence = 3;
        cfg.embed_steps = 5;
        let engine = Engine::new(cfg);
        let v0 = engine.embeddings().version();
        for i in 0..3 {
            engine
                .update(&format!("h{i}"), "r", &format!("t{i}"), 10 + i, None, None)
                .unwrap();
        }
        let deadline = Instant::now() + std::time::Duration::from_secs(10);
        while engine.embeddings().version() == v0 && Instant::now() < deadline {
            std::thread::sleep(std::time::Duration::from_millis(10));
        }
        assert!(
            engine.embeddings().version() > v0,
            "background retrain should bump the embedding version"
        );
    }

    /// End-to-end: ingest → train → query mechanics, ablation flags, live
    /// updates entering the candidate set, and snapshot pinning.
    #[test]
    fn trained_engine_answers_and_respects_flags() {
        let dir = tempdir().unwrap();
        let data = tiny_dataset();
        data.write_files(dir.path()).unwrap();
        let engine = Engine::new(tiny_config());
        engine.ingest_entities_file(&dir.path().join("entities.tsv")).unwrap();
        engine.ingest_facts_file(&dir.path().join("facts_seen.tsv")).unwrap();

        let opts = TrainOptions {
            epochs: 60,
            batch_size: 8,
            lr: 5e-3,
            alpha: 0.3,
            train_max_candidates: 64,
            read_drills: 0.5,
            grad_clip: 1.0,
            seed: 7,
            verbose: false,
        };
        let summary = engine.train(&data.qa_seen, &opts).unwrap();
        assert_eq!(summary.examples, data.qa_seen.len());
        let first = summary.epoch_losses.first().unwrap().total_loss;
        let last = summary.epoch_losses.last().unwrap().total_loss;
        assert!(last < first * 0.5, "loss should fall: {first} → {last}");

        // Seen questions should be largely memorized by this point.
        let report = engine
            .evaluate(&data.qa_seen[..8.min(data.qa_seen.len())], "seen", &QueryFlags::default())
            .unwrap();
        assert!(
            report.exact_match >= 25.0,
            "seen-split EM too low: {}",
            report.exact_match
        );

        let qa = &data.qa_seen[0];
        let out = engine.query(&qa.question, &QueryFlags::default()).unwrap();
        assert!(!out.seeds.is_empty());
        assert!(!out.selected.is_empty() && out.selected.len() <= engine.config().k);
        let weight_sum: f64 = out.selected.iter().map(|(_, w)| w).sum();
        assert!(weight_sum <= 1.0 + 1e-9);

        // Knowledge off: no retrieval, no selection, still generates.
        let off = engine
            .query(&qa.question, &QueryFlags { use_knowledge: false, ..QueryFlags::default() })
            .unwrap();
        assert!(off.seeds.is_empty() && off.selected.is_empty());

        // Dense mode attends to everything but reports at most k facts.
        let dense = engine
            .query(&qa.question, &QueryFlags { dense_attention: true, ..QueryFlags::default() })
            .unwrap();
        assert!(dense.selected.len() <= engine.config().k);

        // A live update about a distinctively-named entity becomes
        // retrievable immediately — but not through a pinned snapshot.
        let before = engine.store().snapshot().epoch();
        engine
            .update("zephyrwind", "powered_by", data.entities[0].0.as_str(), 99_000, None, None)
            .unwrap();
        let question = "what is the powered_by of zephyrwind ?";
        let live = engine.query(question, &QueryFlags::default()).unwrap();
        let snap = engine.store().snapshot();
        let zid = (0..snap.entity_count())
            .map(EntityId)
            .find(|&id| snap.entity(id).map(|e| e.name() == "zephyrwind").unwrap_or(false))
            .expect("new entity exists");
        assert!(
            live.seeds.iter().any(|(id, _)| *id == zid),
            "live query should seed the brand-new entity"
        );
        let pinned = engine
            .query(question, &QueryFlags { static_kg_epoch: Some(before), ..QueryFlags::default() })
            .unwrap();
        assert!(pinned.seeds.iter().all(|(id, _)| *id != zid));
        assert_eq!(pinned.epoch, before);
    }

    #[test]
    fn persistent_engine_reopens_with_model_and_index() {
        let dir = tempdir().unwrap();
        let data_dir = dir.path().join("engine_data");
        let data = tiny_dataset();
        data.write_files(dir.path()).unwrap();

        let wrote = {
            let engine = Engine::open(&data_dir, tiny_config()).unwrap();
            engine.ingest_entities_file(&dir.path().join("entities.tsv")).unwrap();
            engine.ingest_facts_file(&dir.path().join("facts_seen.tsv")).unwrap();
            let opts = TrainOptions {
                epochs: 2,
                batch_size: 8,
                lr: 5e-3,
                alpha: 0.3,
                train_max_candidates: 64,
                read_drills: 0.5,
                grad_clip: 1.0,
                seed: 7,
                verbose: false,
            };
            engine.train(&data.qa_seen, &opts).unwrap();
            engine.save_artifacts().unwrap();
            engine.snapshot_info()
        };

        let engine = Engine::open(&data_dir, tiny_config()).unwrap();
        assert!(engine.has_model());
        let info = engine.snapshot_info();
        assert_eq!(info.entities, wrote.entities);
        assert_eq!(info.live_facts, wrote.live_facts);
        assert_eq!(engine.ann().indexed_count() as u32, info.entities);
        // The reopened model must answer queries.
        let out = engine.query(&data.qa_seen[0].question, &QueryFlags::default()).unwrap();
        assert!(!out.seeds.is_empty());
    }

    #[test]
    fn query_without_model_reports_not_ready() {
        let engine = Engine::new(tiny_config());
        assert!(matches!(
            engine.query("anything ?", &QueryFlags::default()),
            Err(EngineError::NotReady(_))
        ));
    }

    #[test]
    fn malformed_ingest_rows_name_the_line() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.tsv");
        fs::write(&path, "a\tb\tc\t100\nx\ty\n").unwrap();
        let engine = Engine::new(tiny_config());
        match engine.ingest_facts_file(&path) {
            Err(EngineError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
        // A failed parse must not half-commit the good rows.
        assert_eq!(engine.store().snapshot().live_fact_count(), 0);
    }
}
