//! Micro-benchmarks for the three latency-sensitive paths: fact-update
//! commits, the knowledge-attention stage as the candidate count grows, and
//! autoregressive generation. Each benchmark returns a typed report that
//! renders both as a human table and as machine-readable `key=value` lines.
//!
//! These run as ordinary functions (invoked by the `bench` CLI subcommand
//! and by tests) rather than through a harness, so the same numbers are
//! reproducible anywhere a terminal is.

use crate::attention::{
    sparse_attention_forward, AttentionMode, AttnError, AttnProjections, Pooling,
    QueryRepresentation,
};
use crate::config::Config;
use crate::embed::EmbeddingStore;
use crate::engine::{Engine, EngineError};
use crate::ids::FactId;
use crate::model::{DecoderConfig, Model, ModelError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::fmt::Write as _;
use std::time::Instant;

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error("invalid benchmark config: {0}")]
    InvalidConfig(String),
    #[error("engine: {0}")]
    Engine(#[from] EngineError),
    #[error("store: {0}")]
    Store(#[from] crate::store::StoreError),
    #[error("attention: {0}")]
    Attention(#[from] AttnError),
    #[error("model: {0}")]
    Model(#[from] ModelError),
}

/// Order statistics over a latency sample, in microseconds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatencyStats {
    pub samples: usize,
    pub p50_us: u64,
    pub p95_us: u64,
    pub p99_us: u64,
    pub mean_us: f64,
    pub max_us: u64,
}

impl LatencyStats {
    /// Nearest-rank percentiles over the raw sample.
    pub fn from_samples(mut samples: Vec<u64>) -> Result<Self, BenchError> {
        if samples.is_empty() {
            return Err(BenchError::InvalidConfig(
                "latency stats need at least one sample".into(),
            ));
        }
        samples.sort_unstable();
        let n = samples.len();
        let rank = |q: f64| samples[((q * n as f64).ceil() as usize).clamp(1, n) - 1];
        Ok(LatencyStats {
            samples: n,
            p50_us: rank(0.50),
            p95_us: rank(0.95),
            p99_us: rank(0.99),
            mean_us: samples.iter().sum::<u64>() as f64 / n as f64,
            max_us: samples[n - 1],
        })
    }
}

// ---------------------------------------------------------------------------
// Update-commit latency
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct UpdateBenchConfig {
    /// Facts committed in bulk before timing starts (store size).
    pub prefill_facts: usize,
    /// Timed single-fact commits.
    pub samples: usize,
    /// Untimed commits before the samples, to warm caches.
    pub warmup: usize,
    pub seed: u64,
}

impl Default for UpdateBenchConfig {
    fn default() -> Self {
        UpdateBenchConfig {
            prefill_facts: 10_000,
            samples: 1_000,
            warmup: 100,
            seed: 42,
        }
    }
}

#[derive(Debug, Clone)]
pub struct UpdateBenchReport {
    pub prefill_facts: usize,
    pub warmup: usize,
    pub stats: LatencyStats,
}

/// Time single-fact commits (ingress → durable commit, as reported by the
/// engine) against a prefilled in-memory store.
pub fn bench_update_latency(cfg: &UpdateBenchConfig) -> Result<UpdateBenchReport, BenchError> {
    if cfg.samples == 0 {
        return Err(BenchError::InvalidConfig("samples must be > 0".into()));
    }
    let mut engine_cfg = Config::default();
    engine_cfg.retrain_cadence = 0; // isolate the commit path
    engine_cfg.seed = cfg.seed;
    let engine = Engine::new(engine_cfg);

    // Prefill in one batch: cheap, and produces a store big enough that the
    // timed commits exercise realistic index sizes.
    if cfg.prefill_facts > 0 {
        engine.store().batch(|b| {
            let r = b.add_relation("linked_to")?;
            let mut prev = b.add_entity("seed entity 0", "seed entity 0")?;
            for i in 1..=cfg.prefill_facts {
                let name = format!("seed entity {i}");
                let e = b.add_entity(&name, &name)?;
                b.add_fact(prev, r, e, i as i64)?;
                prev = e;
            }
            Ok(())
        })?;
        let snap = engine.store().snapshot();
        for id in engine.store().drain_embed_queue() {
            if let Some(t) = snap.fact(id) {
                engine.embeddings().init_for_fact(&t);
            }
        }
    }

    let mut latencies = Vec::with_capacity(cfg.samples);
    for i in 0..cfg.warmup + cfg.samples {
        let out = engine.update(
            &format!("bench head {i}"),
            "bench_rel",
            &format!("bench tail {i}"),
            1_000_000 + i as i64,
            None,
            None,
        )?;
        if i >= cfg.warmup {
            latencies.push(out.latency_us);
        }
    }
    Ok(UpdateBenchReport {
        prefill_facts: cfg.prefill_facts,
        warmup: cfg.warmup,
        stats: LatencyStats::from_samples(latencies)?,
    })
}

// ---------------------------------------------------------------------------
// Attention-stage scaling
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct AttendSweepConfig {
    /// Candidate-set sizes (M) to measure.
    pub candidate_counts: Vec<usize>,
    pub k: usize,
    pub d_k: usize,
    pub d_model: usize,
    pub d_proj: usize,
    pub n_heads: usize,
    /// Timed repetitions per point (the mean is reported).
    pub repeats: usize,
    pub seed: u64,
}

impl Default for AttendSweepConfig {
    fn default() -> Self {
        AttendSweepConfig {
            candidate_counts: vec![64, 256, 1024, 4096],
            k: 5,
            d_k: 200,
            d_model: 128,
            d_proj: 64,
            n_heads: 4,
            repeats: 20,
            seed: 42,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AttendRow {
    pub m: usize,
    pub sparse_us: f64,
    pub dense_us: f64,
    /// dense_us / sparse_us.
    pub speedup: f64,
}

/// Measure the knowledge-attention stage at several candidate counts,
/// sparse top-k against dense-over-everything, on one synthetic graph.
pub fn bench_attention_scaling(cfg: &AttendSweepConfig) -> Result<Vec<AttendRow>, BenchError> {
    if cfg.candidate_counts.is_empty() || cfg.repeats == 0 {
        return Err(BenchError::InvalidConfig(
            "need at least one candidate count and one repeat".into(),
        ));
    }
    let max_m = *cfg.candidate_counts.iter().max().unwrap();
    if cfg.candidate_counts.iter().any(|&m| m == 0) {
        return Err(BenchError::InvalidConfig("candidate count of 0".into()));
    }

    // One hub entity with max_m outgoing facts: every prefix of the fact
    // list is a valid candidate set.
    let store = crate::store::KgStore::new();
    let facts = store.batch(|b| {
        let hub = b.add_entity("hub", "hub")?;
        let r = b.add_relation("spoke")?;
        let mut ids = Vec::with_capacity(max_m);
        for i in 0..max_m {
            let name = format!("spoke entity {i}");
            let e = b.add_entity(&name, &name)?;
            ids.push(b.add_fact(hub, r, e, i as i64)?);
        }
        Ok(ids)
    })?;
    let snapshot = store.snapshot();
    let embeddings = EmbeddingStore::new(cfg.d_k, cfg.seed);
    embeddings.init_missing_from(&snapshot);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let proj = AttnProjections::init(cfg.d_model, cfg.d_k, cfg.d_proj, cfg.n_heads, &mut rng);
    let query = QueryRepresentation {
        h_query: (0..cfg.d_model).map(|_| rng.random_range(-1.0..1.0)).collect(),
        pooling: Pooling::MeanOverTokens,
    };

    let time_mode = |facts: &[FactId], mode: AttentionMode| -> Result<f64, BenchError> {
        // One untimed pass warms whatever the first call would otherwise pay.
        sparse_attention_forward(&query, &snapshot, facts, &embeddings, &proj, mode)?;
        let started = Instant::now();
        for _ in 0..cfg.repeats {
            sparse_attention_forward(&query, &snapshot, facts, &embeddings, &proj, mode)?;
        }
        Ok(started.elapsed().as_secs_f64() * 1e6 / cfg.repeats as f64)
    };

    let mut rows = Vec::with_capacity(cfg.candidate_counts.len());
    for &m in &cfg.candidate_counts {
        let m = m.min(max_m);
        let slice = &facts[..m];
        let sparse_us = time_mode(slice, AttentionMode::Sparse { k: cfg.k })?;
        let dense_us = time_mode(slice, AttentionMode::Dense)?;
        rows.push(AttendRow {
            m,
            sparse_us,
            dense_us,
            speedup: dense_us / sparse_us,
        });
    }
    Ok(rows)
}

// ---------------------------------------------------------------------------
// Generation throughput
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct GenerationBenchConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub prompt_len: usize,
    pub new_tokens: usize,
    pub repeats: usize,
    pub seed: u64,
}

impl Default for GenerationBenchConfig {
    fn default() -> Self {
        GenerationBenchConfig {
            vocab_size: 2_000,
            d_model: 128,
            n_layers: 4,
            prompt_len: 16,
            new_tokens: 16,
            repeats: 5,
            seed: 42,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GenerationBenchReport {
    pub tokens_generated: usize,
    pub repeats: usize,
    pub ms_per_token: f64,
}

/// Time greedy decoding on a randomly initialized model (throughput depends
/// on shapes, not weights).
pub fn bench_generation(cfg: &GenerationBenchConfig) -> Result<GenerationBenchReport, BenchError> {
    if cfg.repeats == 0 || cfg.new_tokens == 0 {
        return Err(BenchError::InvalidConfig(
            "repeats and new_tokens must be > 0".into(),
        ));
    }
    let dc = DecoderConfig {
        vocab_size: cfg.vocab_size,
        d_model: cfg.d_model,
        n_layers: cfg.n_layers,
        n_heads: 4,
        d_ffn: 4 * cfg.d_model,
        max_seq_len: cfg.prompt_len + cfg.new_tokens + 1,
        fusion_layers: vec![cfg.n_layers - 1],
        d_k: cfg.d_model / 2,
        attn_d_proj: 64,
        attn_n_heads: 4,
        seed: cfg.seed,
    };
    let model = Model::new(dc)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let prompt: Vec<u32> = (0..cfg.prompt_len)
        .map(|_| rng.random_range(4..cfg.vocab_size as u32))
        .collect();
    let k_final: Vec<f64> = (0..cfg.d_model).map(|_| rng.random_range(-1.0..1.0)).collect();

    // An EOS id outside the vocabulary can never be produced, so every run
    // generates exactly `new_tokens` tokens.
    let never_eos = cfg.vocab_size as u32;
    let mut total_tokens = 0usize;
    let started = Instant::now();
    for _ in 0..cfg.repeats {
        let seq = model.generate_greedy(&prompt, Some(&k_final), cfg.new_tokens, never_eos)?;
        total_tokens += seq.len() - prompt.len();
    }
    let elapsed_ms = started.elapsed().as_secs_f64() * 1e3;
    Ok(GenerationBenchReport {
        tokens_generated: total_tokens,
        repeats: cfg.repeats,
        ms_per_token: elapsed_ms / total_tokens as f64,
    })
}

// ---------------------------------------------------------------------------
// Rendering
// ---------------------------------------------------------------------------

pub fn render_update_report(r: &UpdateBenchReport) -> String {
    let mut out = String::new();
    writeln!(
        out,
        "update commit latency  (prefill {} facts, {} warmup, {} samples)",
        r.prefill_facts, r.warmup, r.stats.samples
    )
    .unwrap();
    writeln!(
        out,
        "  p50 {:>7} us   p95 {:>7} us   p99 {:>7} us   mean {:>9.1} us   max {:>7} us",
        r.stats.p50_us, r.stats.p95_us, r.stats.p99_us, r.stats.mean_us, r.stats.max_us
    )
    .unwrap();
    out
}

pub fn update_report_machine_line(r: &UpdateBenchReport) -> String {
    format!(
        "bench=update_latency prefill={} warmup={} samples={} p50_us={} p95_us={} p99_us={} mean_us={:.1} max_us={}",
        r.prefill_facts, r.warmup, r.stats.samples, r.stats.p50_us, r.stats.p95_us,
        r.stats.p99_us, r.stats.mean_us, r.stats.max_us
    )
}

pub fn render_attend_rows(rows: &[AttendRow], k: usize) -> String {
    let mut out = String::new();
    writeln!(out, "knowledge attention scaling  (sparse k={k} vs dense)").unwrap();
    writeln!(out, "  {:>6}  {:>12}  {:>12}  {:>8}", "M", "sparse (us)", "dense (us)", "dense/sparse").unwrap();
    for r in rows {
        writeln!(
            out,
            "  {:>6}  {:>12.1}  {:>12.1}  {:>8.2}x",
            r.m, r.sparse_us, r.dense_us, r.speedup
        )
        .unwrap();
    }
    out
}

pub fn attend_rows_machine_lines(rows: &[AttendRow], k: usize) -> Vec<String> {
    rows.iter()
        .map(|r| {
            format!(
                "bench=attend_scaling m={} k={} sparse_us={:.1} dense_us={:.1} speedup={:.3}",
                r.m, k, r.sparse_us, r.dense_us, r.speedup
            )
        })
        .collect()
}

pub fn render_generation_report(r: &GenerationBenchReport) -> String {
    format!(
        "greedy generation  ({} tokens over {} runs): {:.2} ms/token\n",
        r.tokens_generated, r.repeats, r.ms_per_token
    )
}

pub fn generation_report_machine_line(r: &GenerationBenchReport) -> String {
    format!(
        "bench=generation tokens={} repeats={} ms_per_token={:.3}",
        r.tokens_generated, r.repeats, r.ms_per_token
    )
}
