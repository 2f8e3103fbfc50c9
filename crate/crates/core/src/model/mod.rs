//! Toy autoregressive decoder with a knowledge-fusion hook.
//!
//! The decoder is a standard post-norm transformer at desk scale, modified
//! in exactly one place: at each *fusion layer* the post-attention state is
//! combined with an externally-computed knowledge vector before
//! normalization,
//!
//! ```text
//!   H_fused = LayerNorm(H_self + λ · broadcast(k_final))
//! ```
//!
//! with λ a learnable scalar gate per fusion layer. The pooled hidden state
//! entering the first fusion layer doubles as the query representation that
//! the sparse knowledge attention consumes, so a forward pass is staged:
//! lower layers → pool h_query → (caller runs retrieval + attention) →
//! upper layers with k_final.
//!
//! Token embeddings are tied with the output projection, and rows for
//! entity-name tokens can be *lifted* from the knowledge-graph embedding
//! table. Lifting is what lets a trained model name entities it has never
//! seen in text: the decoder learns to route the tail block of k_final to
//! the output, and the tied lifted row turns that into the right token's
//! logit for any entity row the KG holds.

pub mod layers;
pub mod loss;
pub mod tokenizer;

mod decoder;

pub use decoder::{ForwardCache, ForwardOutput, FusionLayerTrace, FusionTrace};
pub use loss::{aux_loss, lm_loss, total_loss_and_grads, AdamState, TrainBatch, TrainExample, TrainingObjective};

use crate::attention::{AttnProjections, DEFAULT_D_PROJ, DEFAULT_N_HEADS};
use crate::util::Fnv64;
use layers::{FfnParams, MhaParams};
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::io::{BufWriter, Read, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("sequence of {len} tokens exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("gold attention target must be exactly one-hot")]
    NotOneHot,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("knowledge attention: {0}")]
    Attention(#[from] crate::attention::AttnError),
}

/// Decoder hyperparameters. `d_k`, `attn_d_proj`, and `attn_n_heads` size
/// the jointly-trained knowledge-attention projections.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecoderConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ffn: usize,
    pub max_seq_len: usize,
    /// Layer indices whose post-attention state receives k_final.
    pub fusion_layers: Vec<usize>,
    pub d_k: usize,
    pub attn_d_proj: usize,
    pub attn_n_heads: usize,
    pub seed: u64,
}

impl DecoderConfig {
    /// Spec defaults at a given vocabulary and KG embedding size.
    pub fn with_defaults(vocab_size: usize, d_k: usize, seed: u64) -> Self {
        DecoderConfig {
            vocab_size,
            d_model: 128,
            n_layers: 4,
            n_heads: 4,
            d_ffn: 512,
            max_seq_len: 256,
            fusion_layers: vec![3],
            d_k,
            attn_d_proj: DEFAULT_D_PROJ,
            attn_n_heads: DEFAULT_N_HEADS,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.d_model % self.n_heads != 0 {
            return Err(ModelError::InvalidConfig(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.attn_d_proj % self.attn_n_heads != 0 {
            return Err(ModelError::InvalidConfig(
                "attn_d_proj must divide into attn_n_heads".into(),
            ));
        }
        if self.fusion_layers.iter().any(|&l| l >= self.n_layers) {
            return Err(ModelError::InvalidConfig(format!(
                "fusion layer out of range (n_layers = {})",
                self.n_layers
            )));
        }
        let mut sorted = self.fusion_layers.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.fusion_layers.len() || sorted != self.fusion_layers {
            return Err(ModelError::InvalidConfig(
                "fusion_layers must be sorted and unique".into(),
            ));
        }
        if self.vocab_size == 0 || self.n_layers == 0 || self.max_seq_len == 0 {
            return Err(ModelError::InvalidConfig("zero-sized model".into()));
        }
        Ok(())
    }

    /// The layer whose *input* is pooled into h_query: the first fusion
    /// layer, or past-the-end when no fusion is configured.
    pub fn staging_layer(&self) -> usize {
        self.fusion_layers.first().copied().unwrap_or(self.n_layers)
    }
}

/// Per-layer trainable tensors.
#[derive(Debug, Clone)]
pub struct LayerParams {
    pub mha: MhaParams,
    pub ln1_gamma: Array1<f64>,
    pub ln1_beta: Array1<f64>,
    pub ffn: FfnParams,
    pub ln2_gamma: Array1<f64>,
    pub ln2_beta: Array1<f64>,
}

/// Every trainable tensor in one place, with a fixed traversal order that
/// the optimizer, checkpoint format, and gradient checks all share.
#[derive(Debug, Clone)]
pub struct ModelParams {
    /// vocab × d_model; tied with the output projection.
    pub tok_emb: Array2<f64>,
    /// max_seq_len × d_model learned positions.
    pub pos_emb: Array2<f64>,
    pub layers: Vec<LayerParams>,
    /// λ per fusion layer, aligned with `config.fusion_layers`.
    pub gates: Vec<f64>,
    /// Knowledge-attention projections, trained jointly with the decoder.
    pub attn: AttnProjections,
}

impl ModelParams {
    fn init(config: &DecoderConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d = config.d_model;
        let xavier = |r: usize, c: usize, rng: &mut ChaCha8Rng| {
            let bound = (6.0 / (r + c) as f64).sqrt();
            Array2::from_shape_fn((r, c), |_| rng.random_range(-bound..bound))
        };
        let tok_emb = Array2::from_shape_fn((config.vocab_size, d), |_| rng.random_range(-0.1..0.1));
        let pos_emb = Array2::from_shape_fn((config.max_seq_len, d), |_| rng.random_range(-0.1..0.1));
        let layers = (0..config.n_layers)
            .map(|_| LayerParams {
                mha: MhaParams {
                    w_qkv: xavier(d, 3 * d, &mut rng),
                    w_o: xavier(d, d, &mut rng),
                },
                ln1_gamma: Array1::ones(d),
                ln1_beta: Array1::zeros(d),
                ffn: FfnParams {
                    w1: xavier(d, config.d_ffn, &mut rng),
                    b1: Array1::zeros(config.d_ffn),
                    w2: xavier(config.d_ffn, d, &mut rng),
                    b2: Array1::zeros(d),
                },
                ln2_gamma: Array1::ones(d),
                ln2_beta: Array1::zeros(d),
            })
            .collect();
        let gates = vec![0.1; config.fusion_layers.len()];
        let attn = AttnProjections::init(
            d,
            config.d_k,
            config.attn_d_proj,
            config.attn_n_heads,
            &mut rng,
        );
        ModelParams {
            tok_emb,
            pos_emb,
            layers,
            gates,
            attn,
        }
    }

    pub fn zeros_like(&self) -> Self {
        ModelParams {
            tok_emb: Array2::zeros(self.tok_emb.dim()),
            pos_emb: Array2::zeros(self.pos_emb.dim()),
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    mha: MhaParams {
                        w_qkv: Array2::zeros(l.mha.w_qkv.dim()),
                        w_o: Array2::zeros(l.mha.w_o.dim()),
                    },
                    ln1_gamma: Array1::zeros(l.ln1_gamma.len()),
                    ln1_beta: Array1::zeros(l.ln1_beta.len()),
                    ffn: FfnParams {
                        w1: Array2::zeros(l.ffn.w1.dim()),
                        b1: Array1::zeros(l.ffn.b1.len()),
                        w2: Array2::zeros(l.ffn.w2.dim()),
                        b2: Array1::zeros(l.ffn.b2.len()),
                    },
                    ln2_gamma: Array1::zeros(l.ln2_gamma.len()),
                    ln2_beta: Array1::zeros(l.ln2_beta.len()),
                })
                .collect(),
            gates: vec![0.0; self.gates.len()],
            attn: AttnProjections {
                w_q: Array2::zeros(self.attn.w_q.dim()),
                w_k: Array2::zeros(self.attn.w_k.dim()),
                w_v: Array2::zeros(self.attn.w_v.dim()),
                n_heads: self.attn.n_heads,
                d_proj: self.attn.d_proj,
            },
        }
    }

    /// Visit every parameter in the canonical order.
    pub fn for_each(&self, f: &mut impl FnMut(f64)) {
        for v in self.tok_emb.iter() {
            f(*v);
        }
        for v in self.pos_emb.iter() {
            f(*v);
        }
        for l in &self.layers {
            for v in l.mha.w_qkv.iter() {
                f(*v);
            }
            for v in l.mha.w_o.iter() {
                f(*v);
            }
            for v in l.ln1_gamma.iter() {
                f(*v);
            }
            for v in l.ln1_beta.iter() {
                f(*v);
            }
            for v in l.ffn.w1.iter() {
                f(*v);
            }
            for v in l.ffn.b1.iter() {
                f(*v);
            }
            for v in l.ffn.w2.iter() {
                f(*v);
            }
            for v in l.ffn.b2.iter() {
                f(*v);
            }
            for v in l.ln2_gamma.iter() {
                f(*v);
            }
            for v in l.ln2_beta.iter() {
                f(*v);
            }
        }
        for v in &self.gates {
            f(*v);
        }
        for v in self.attn.w_q.iter() {
            f(*v);
        }
        for v in self.attn.w_k.iter() {
            f(*v);
        }
        for v in self.attn.w_v.iter() {
            f(*v);
        }
    }

    /// Mutable visit in the same canonical order.
    pub fn for_each_mut(&mut self, f: &mut impl FnMut(&mut f64)) {
        for v in self.tok_emb.iter_mut() {
            f(v);
        }
        for v in self.pos_emb.iter_mut() {
            f(v);
        }
        for l in &mut self.layers {
            for v in l.mha.w_qkv.iter_mut() {
                f(v);
            }
            for v in l.mha.w_o.iter_mut() {
                f(v);
            }
            for v in l.ln1_gamma.iter_mut() {
                f(v);
            }
            for v in l.ln1_beta.iter_mut() {
                f(v);
            }
            for v in l.ffn.w1.iter_mut() {
                f(v);
            }
            for v in l.ffn.b1.iter_mut() {
                f(v);
            }
            for v in l.ffn.w2.iter_mut() {
                f(v);
            }
            for v in l.ffn.b2.iter_mut() {
                f(v);
            }
            for v in l.ln2_gamma.iter_mut() {
                f(v);
            }
            for v in l.ln2_beta.iter_mut() {
                f(v);
            }
        }
        for v in &mut self.gates {
            f(v);
        }
        for v in self.attn.w_q.iter_mut() {
            f(v);
        }
        for v in self.attn.w_k.iter_mut() {
            f(v);
        }
        for v in self.attn.w_v.iter_mut() {
            f(v);
        }
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.for_each(&mut |_| n += 1);
        n
    }
}

/// The decoder plus everything needed to run it: parameters, config, and
/// the lifted entity-token rows.
pub struct Model {
    pub config: DecoderConfig,
    pub params: ModelParams,
    /// Token-id → d_model row copied from the KG embedding table. A lifted
    /// row shadows `tok_emb` on both the input and the tied output side and
    /// receives no gradient (the KG table owns it).
    pub lifted: BTreeMap<u32, Vec<f64>>,
    /// Optimizer steps taken; informational, stored in checkpoints.
    pub step: u64,
}

impl Model {
    pub fn new(config: DecoderConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let params = ModelParams::init(&config);
        Ok(Model {
            config,
            params,
            lifted: BTreeMap::new(),
            step: 0,
        })
    }

    /// Install or replace a lifted row (length must be d_model).
    pub fn set_lifted_row(&mut self, token: u32, row: Vec<f64>) -> Result<(), ModelError> {
        if row.len() != self.config.d_model {
            return Err(ModelError::ShapeMismatch(format!(
                "lifted row len {} vs d_model {}",
                row.len(),
                self.config.d_model
            )));
        }
        if token as usize >= self.config.vocab_size {
            return Err(ModelError::ShapeMismatch(format!(
                "token {token} outside vocab of {}",
                self.config.vocab_size
            )));
        }
        self.lifted.insert(token, row);
        Ok(())
    }

    /// The effective embedding row for a token: lifted if present.
    #[cfg(test)]
    pub(crate) fn emb_row(&self, token: u32) -> ndarray::ArrayView1<'_, f64> {
        match self.lifted.get(&token) {
            Some(row) => ndarray::ArrayView1::from(&row[..]),
            None => self.params.tok_emb.row(token as usize),
        }
    }

    // -- checkpointing ------------------------------------------------------

    /// Serialize config, step, parameters (canonical order), and lifted
    /// rows. Byte-deterministic; FNV-checksummed.
    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let file = std::fs::File::create(path)?;
        let mut w = CheckWriter::new(BufWriter::new(file));
        w.put(b"DKLM")?;
        w.put_u32(1)?;
        for v in [
            self.config.vocab_size,
            self.config.d_model,
            self.config.n_layers,
            self.config.n_heads,
            self.config.d_ffn,
            self.config.max_seq_len,
        ] {
            w.put_u64(v as u64)?;
        }
        w.put_u32(self.config.fusion_layers.len() as u32)?;
        for &l in &self.config.fusion_layers {
            w.put_u32(l as u32)?;
        }
        for v in [
            self.config.d_k,
            self.config.attn_d_proj,
            self.config.attn_n_heads,
        ] {
            w.put_u64(v as u64)?;
        }
        w.put_u64(self.config.seed)?;
        w.put_u64(self.step)?;
        let mut io_err = None;
        self.params.for_each(&mut |v| {
            if io_err.is_none() {
                if let Err(e) = w.put_f64(v) {
                    io_err = Some(e);
                }
            }
        });
        if let Some(e) = io_err {
            return Err(e.into());
        }
        w.put_u32(self.lifted.len() as u32)?;
        for (tok, row) in &self.lifted {
            w.put_u32(*tok)?;
            for &v in row {
                w.put_f64(v)?;
            }
        }
        w.finish()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        if bytes.len() < 16 || &bytes[0..4] != b"DKLM" {
            return Err(ModelError::Corrupt("bad checkpoint magic".into()));
        }
        let body = &bytes[..bytes.len() - 8];
        let stored = u64::from_le_bytes(bytes[bytes.len() - 8..].try_into().unwrap());
        let mut h = Fnv64::new();
        h.update(body);
        if h.finish() != stored {
            return Err(ModelError::Corrupt("checksum mismatch".into()));
        }
        let mut r = SliceReader { buf: body, pos: 4 };
        let version = r.u32()?;
        if version != 1 {
            return Err(ModelError::Corrupt(format!("unknown version {version}")));
        }
        let vocab_size = r.u64()? as usize;
        let d_model = r.u64()? as usize;
        let n_layers = r.u64()? as usize;
        let n_heads = r.u64()? as usize;
        let d_ffn = r.u64()? as usize;
        let max_seq_len = r.u64()? as usize;
        let n_fusion = r.u32()? as usize;
        let mut fusion_layers = Vec::with_capacity(n_fusion);
        for _ in 0..n_fusion {
            fusion_layers.push(r.u32()? as usize);
        }
        let d_k = r.u64()? as usize;
        let attn_d_proj = r.u64()? as usize;
        let attn_n_heads = r.u64()? as usize;
        let seed = r.u64()?;
        let config = DecoderConfig {
            vocab_size,
            d_model,
            n_layers,
            n_heads,
            d_ffn,
            max_seq_len,
            fusion_layers,
            d_k,
            attn_d_proj,
            attn_n_heads,
            seed,
        };
        config.validate().map_err(|e| ModelError::Corrupt(e.to_string()))?;
        let step = r.u64()?;
        let mut params = ModelParams::init(&config);
        let mut read_err = None;
        params.for_each_mut(&mut |v| {
            if read_err.is_none() {
                match r.f64() {
                    Ok(x) => *v = x,
                    Err(e) => read_err = Some(e),
                }
            }
        });
        if let Some(e) = read_err {
            return Err(e);
        }
        let n_lifted = r.u32()? as usize;
        let mut lifted = BTreeMap::new();
        for _ in 0..n_lifted {
            let tok = r.u32()?;
            let mut row = Vec::with_capacity(d_model);
            for _ in 0..d_model {
                row.push(r.f64()?);
            }
            lifted.insert(tok, row);
        }
        if r.pos != body.len() {
            return Err(ModelError::Corrupt("trailing bytes".into()));
        }
        Ok(Model {
            config,
            params,
            lifted,
            step,
        })
    }
}

struct CheckWriter<W: Write> {
    inner: W,
    hash: Fnv64,
}

impl<W: Write> CheckWriter<W> {
    fn new(inner: W) -> Self {
        CheckWriter {
            inner,
            hash: Fnv64::new(),
        }
    }
    fn put(&mut self, bytes: &[u8]) -> std::io::Result<()> {
        self.hash.update(bytes);
        self.inner.write_all(bytes)
    }
    fn put_u32(&mut self, v: u32) -> std::io::Result<()> {
        self.put(&v.to_le_bytes())
    }
    fn put_u64(&mut self, v: u64) -> std::io::Result<()> {
        self.put(&v.to_le_bytes())
    }
    fn put_f64(&mut self, v: f64) -> std::io::Result<()> {
        self.put(&v.to_le_bytes())
    }
    fn finish(mut self) -> std::io::Result<()> {
        let digest = self.hash.finish();
        self.inner.write_all(&digest.to_le_bytes())?;
        self.inner.flush()
    }
}

struct SliceReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl SliceReader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8], ModelError> {
        if self.pos + n > self.buf.len() {
            return Err(ModelError::Corrupt("truncated checkpoint".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32, ModelError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64, ModelError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64, ModelError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> DecoderConfig {
        DecoderConfig {
            vocab_size: 11,
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            d_ffn: 16,
            max_seq_len: 12,
            fusion_layers: vec![1],
            d_k: 2,
            attn_d_proj: 4,
            attn_n_heads: 2,
            seed: 5,
        }
    }

    #[test]
    fn config_validation_catches_bad_shapes() {
        let mut c = tiny_config();
        c.n_heads = 3;
        assert!(c.validate().is_err());
        let mut c = tiny_config();
        c.fusion_layers = vec![2];
        assert!(c.validate().is_err());
        let mut c = tiny_config();
        c.fusion_layers = vec![1, 0];
        assert!(c.validate().is_err());
        assert!(tiny_config().validate().is_ok());
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let a = Model::new(tiny_config()).unwrap();
        let b = Model::new(tiny_config()).unwrap();
        let mut va = Vec::new();
        a.params.for_each(&mut |v| va.push(v));
        let mut vb = Vec::new();
        b.params.for_each(&mut |v| vb.push(v));
        assert_eq!(va, vb);
        assert!(va.len() > 1000);
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = Model::new(tiny_config()).unwrap();
        m.step = 42;
        m.set_lifted_row(7, vec![0.5; 8]).unwrap();
        let p1 = dir.path().join("m1.ckpt");
        let p2 = dir.path().join("m2.ckpt");
        m.save(&p1).unwrap();
        m.save(&p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());

        let loaded = Model::load(&p1).unwrap();
        assert_eq!(loaded.config, m.config);
        assert_eq!(loaded.step, 42);
        assert_eq!(loaded.lifted, m.lifted);
        let p3 = dir.path().join("m3.ckpt");
        loaded.save(&p3).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p3).unwrap());

        // Flip a byte → checksum failure.
        let mut bytes = std::fs::read(&p1).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 1;
        std::fs::write(&p2, &bytes).unwrap();
        assert!(matches!(Model::load(&p2), Err(ModelError::Corrupt(_))));
    }

    #[test]
    fn lifted_rows_shadow_token_embeddings() {
        let mut m = Model::new(tiny_config()).unwrap();
        let before = m.emb_row(3).to_vec();
        m.set_lifted_row(3, vec![9.0; 8]).unwrap();
        assert_eq!(m.emb_row(3).to_vec(), vec![9.0; 8]);
        assert_ne!(before, vec![9.0; 8]);
        assert!(m.set_lifted_row(3, vec![1.0; 4]).is_err());
        assert!(m.set_lifted_row(99, vec![1.0; 8]).is_err());
    }
}
