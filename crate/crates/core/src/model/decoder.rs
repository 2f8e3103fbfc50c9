//! Staged decoder forward and backward passes.
//!
//! A forward pass runs in two halves around the *staging point* (the first
//! fusion layer): lower layers produce the pooled query representation, the
//! caller may turn that into a knowledge vector, and the upper layers
//! consume it. Backward mirrors the split so the caller can backpropagate
//! through its knowledge pipeline between the halves:
//!
//! ```text
//!   forward:  embed → layers [0, s) → pool h_query over query prefix ─┐
//!                                                       (caller) k_final
//!             layers [s, n) + fusion ◄─────────────────────────────┘ → logits
//!
//!   backward: d_logits → upper layers → d_staging, d_k_final
//!             (caller backprops its pipeline → d_h_query)
//!             d_staging + d_h_query/Q over the prefix → lower layers → embeddings
//! ```
//!
//! The pool covers only the first `query_len` positions (the question part
//! of a training sequence, or the whole prompt at inference). Lower layers
//! are causal, so the pooled representation of a training sequence is
//! bit-identical to the one the same prompt produces alone at inference —
//! the selection pipeline never trains on signals that leak in from the
//! answer tokens.

use super::layers::{
    ffn_backward, ffn_forward, layer_norm, layer_norm_backward, mha_backward, mha_forward,
    FfnCache, LnCache, MhaCache,
};
use super::{Model, ModelError, ModelParams};
use crate::attention::{Pooling, QueryRepresentation};
use ndarray::{Array1, Array2, ArrayView1, Axis};

/// Inputs and intermediates of one fusion layer, kept for inspection and
/// training checks.
#[derive(Debug, Clone)]
pub struct FusionLayerTrace {
    pub layer: usize,
    /// Post-attention residual state entering the fusion expression.
    pub h_self: Array2<f64>,
    pub lambda: f64,
    /// `(H_self + λ·k_final)` after normalization, before the affine map —
    /// every row has mean 0 and variance 1 by construction.
    pub h_fused_normalized: Array2<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct FusionTrace {
    pub layers: Vec<FusionLayerTrace>,
}

pub(crate) struct LayerCache {
    mha: MhaCache,
    ln1: LnCache,
    ffn: FfnCache,
    ln2: LnCache,
    /// Which gate index applied (position in config.fusion_layers), if any.
    fusion_gate: Option<usize>,
}

pub struct ForwardCache {
    pub(crate) tokens: Vec<u32>,
    /// How many leading positions fed the pooled query representation.
    pub(crate) query_len: usize,
    pub(crate) layer_caches: Vec<LayerCache>,
    pub(crate) h_last: Array2<f64>,
    /// Effective embedding matrix used by this pass (lifted rows applied).
    pub(crate) emb: Array2<f64>,
    pub(crate) k_final: Option<Vec<f64>>,
}

pub struct ForwardOutput {
    /// T × vocab next-token scores.
    pub logits: Array2<f64>,
    pub trace: FusionTrace,
    /// Mean of the first `query_len` token states entering the first
    /// fusion layer.
    pub h_query: QueryRepresentation,
    pub cache: ForwardCache,
}

/// Gradient hand-off between the two backward halves.
pub struct UpperBackward {
    /// Gradient w.r.t. the hidden state entering the staging layer.
    pub d_staging: Array2<f64>,
    /// Gradient w.r.t. k_final, present when the pass consumed one.
    pub d_k_final: Option<Array1<f64>>,
}

impl Model {
    /// Full forward pass with a knowledge hook: `knowledge` receives the
    /// query representation pooled over the first `query_len` positions
    /// and returns the k_final to fuse (or `None` to run knowledge-free).
    /// Pass `tokens.len()` when the whole sequence is the query.
    pub fn forward_staged(
        &self,
        tokens: &[u32],
        query_len: usize,
        knowledge: impl FnOnce(&QueryRepresentation) -> Option<Vec<f64>>,
    ) -> Result<ForwardOutput, ModelError> {
        let t = tokens.len();
        if t == 0 {
            return Err(ModelError::ShapeMismatch("empty token sequence".into()));
        }
        if query_len == 0 || query_len > t {
            return Err(ModelError::ShapeMismatch(format!(
                "query prefix of {query_len} in a sequence of {t}"
            )));
        }
        if t > self.config.max_seq_len {
            return Err(ModelError::SequenceTooLong {
                len: t,
                max: self.config.max_seq_len,
            });
        }
        for &tok in tokens {
            if tok as usize >= self.config.vocab_size {
                return Err(ModelError::ShapeMismatch(format!(
                    "token {tok} outside vocabulary of {}",
                    self.config.vocab_size
                )));
            }
        }
        let d = self.config.d_model;
        let emb = self.effective_embeddings();
        let mut x = Array2::zeros((t, d));
        for (i, &tok) in tokens.iter().enumerate() {
            let row = &emb.row(tok as usize) + &self.params.pos_emb.row(i);
            x.row_mut(i).assign(&row);
        }

        let staging = self.config.staging_layer();
        let mut layer_caches = Vec::with_capacity(self.config.n_layers);
        let mut trace = FusionTrace::default();
        let mut h_query: Option<QueryRepresentation> = None;
        let mut k_final: Option<Vec<f64>> = None;
        let mut knowledge = Some(knowledge);

        for l in 0..self.config.n_layers {
            if l == staging {
                let q = pool_mean_prefix(&x, query_len);
                k_final = (knowledge.take().expect("staging point reached once"))(&q);
                if let Some(k) = &k_final {
                    if k.len() != d {
                        return Err(ModelError::ShapeMismatch(format!(
                            "k_final len {} vs d_model {d}",
                            k.len()
                        )));
                    }
                }
                h_query = Some(q);
            }
            let (next, cache, layer_trace) = self.run_layer(l, &x, k_final.as_deref());
            if let Some(lt) = layer_trace {
                trace.layers.push(lt);
            }
            layer_caches.push(cache);
            x = next;
        }
        // No fusion configured: the hook still runs, on the pooled final state.
        let h_query = h_query.unwrap_or_else(|| {
            let q = pool_mean_prefix(&x, query_len);
            if let Some(k) = knowledge.take() {
                k(&q);
            }
            q
        });

        let logits = x.dot(&emb.t());
        Ok(ForwardOutput {
            logits,
            trace,
            h_query,
            cache: ForwardCache {
                tokens: tokens.to_vec(),
                query_len,
                layer_caches,
                h_last: x,
                emb,
                k_final,
            },
        })
    }

    /// Plain forward: fuse a pre-computed knowledge vector (or none).
    pub fn forward(
        &self,
        tokens: &[u32],
        k_final: Option<&[f64]>,
    ) -> Result<ForwardOutput, ModelError> {
        self.forward_staged(tokens, tokens.len(), |_| k_final.map(<[f64]>::to_vec))
    }

    fn run_layer(
        &self,
        l: usize,
        x: &Array2<f64>,
        k_final: Option<&[f64]>,
    ) -> (Array2<f64>, LayerCache, Option<FusionLayerTrace>) {
        let p = &self.params.layers[l];
        let (attn_out, mha) = mha_forward(x, &p.mha, self.config.n_heads);
        let h_self = x + &attn_out;
        let gate_idx = self.config.fusion_layers.iter().position(|&f| f == l);
        let (s, applied_gate) = match (gate_idx, k_final) {
            (Some(gi), Some(k)) => {
                let lambda = self.params.gates[gi];
                let mut s = h_self.clone();
                for mut row in s.rows_mut() {
                    row.scaled_add(lambda, &ArrayView1::from(k));
                }
                (s, Some(gi))
            }
            _ => (h_self.clone(), None),
        };
        let (h_norm, ln1) = layer_norm(&s, &p.ln1_gamma, &p.ln1_beta);
        let layer_trace = gate_idx.map(|gi| FusionLayerTrace {
            layer: l,
            h_self: h_self.clone(),
            lambda: self.params.gates[gi],
            h_fused_normalized: ln1.x_hat.clone(),
        });
        let (f_out, ffn) = ffn_forward(&h_norm, &p.ffn);
        let s2 = &h_norm + &f_out;
        let (h_out, ln2) = layer_norm(&s2, &p.ln2_gamma, &p.ln2_beta);
        (
            h_out,
            LayerCache {
                mha,
                ln1,
                ffn,
                ln2,
                fusion_gate: applied_gate,
            },
            layer_trace,
        )
    }

    fn effective_embeddings(&self) -> Array2<f64> {
        let mut e = self.params.tok_emb.clone();
        for (tok, row) in &self.lifted {
            e.row_mut(*tok as usize).assign(&ArrayView1::from(&row[..]));
        }
        e
    }

    // -- backward -----------------------------------------------------------

    /// Backpropagate `d_logits` through the output projection and the
    /// layers at or above the staging point, accumulating parameter
    /// gradients into `grads`.
    pub fn backward_upper(
        &self,
        cache: &ForwardCache,
        d_logits: &Array2<f64>,
        grads: &mut ModelParams,
    ) -> UpperBackward {
        // logits = H · Eᵀ (tied embeddings): dH = dL·E, dE = dLᵀ·H.
        let mut d_h = d_logits.dot(&cache.emb);
        let d_emb = d_logits.t().dot(&cache.h_last);
        for v in 0..self.config.vocab_size as u32 {
            if !self.lifted.contains_key(&v) {
                let mut row = grads.tok_emb.row_mut(v as usize);
                row += &d_emb.row(v as usize);
            }
        }
        let staging = self.config.staging_layer();
        let mut d_k_final = cache
            .k_final
            .as_ref()
            .map(|_| Array1::zeros(self.config.d_model));
        for l in (staging..self.config.n_layers).rev() {
            d_h = self.backward_layer(l, d_h, cache, grads, d_k_final.as_mut());
        }
        UpperBackward {
            d_staging: d_h,
            d_k_final,
        }
    }

    /// Backpropagate from the staging point down to the embeddings.
    /// `d_h_query` is the gradient into the pooled query representation
    /// (it spreads as 1/query_len over the pooled prefix rows).
    pub fn backward_lower(
        &self,
        cache: &ForwardCache,
        upper: UpperBackward,
        d_h_query: Option<&[f64]>,
        grads: &mut ModelParams,
    ) {
        let mut d_h = upper.d_staging;
        if let Some(dq) = d_h_query {
            let q = cache.query_len as f64;
            let spread = ArrayView1::from(dq);
            for mut row in d_h.rows_mut().into_iter().take(cache.query_len) {
                row.scaled_add(1.0 / q, &spread);
            }
        }
        let staging = self.config.staging_layer().min(self.config.n_layers);
        for l in (0..staging).rev() {
            d_h = self.backward_layer(l, d_h, cache, grads, None);
        }
        for (i, &tok) in cache.tokens.iter().enumerate() {
            if !self.lifted.contains_key(&tok) {
                let mut row = grads.tok_emb.row_mut(tok as usize);
                row += &d_h.row(i);
            }
            let mut row = grads.pos_emb.row_mut(i);
            row += &d_h.row(i);
        }
    }

    /// Single-phase backward for passes without a knowledge pipeline in
    /// the loop; returns d_k_final if the forward consumed one.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        d_logits: &Array2<f64>,
        grads: &mut ModelParams,
    ) -> Option<Array1<f64>> {
        let upper = self.backward_upper(cache, d_logits, grads);
        let d_k = upper.d_k_final.clone();
        self.backward_lower(cache, upper, None, grads);
        d_k
    }

    fn backward_layer(
        &self,
        l: usize,
        d_out: Array2<f64>,
        cache: &ForwardCache,
        grads: &mut ModelParams,
        mut d_k_final: Option<&mut Array1<f64>>,
    ) -> Array2<f64> {
        let p = &self.params.layers[l];
        let c = &cache.layer_caches[l];

        let ln2 = layer_norm_backward(&d_out, &p.ln2_gamma, &c.ln2);
        grads.layers[l].ln2_gamma += &ln2.d_gamma;
        grads.layers[l].ln2_beta += &ln2.d_beta;
        let d_s2 = ln2.d_x;

        let ffn = ffn_backward(&d_s2, &p.ffn, &c.ffn);
        grads.layers[l].ffn.w1 += &ffn.d_w1;
        grads.layers[l].ffn.b1 += &ffn.d_b1;
        grads.layers[l].ffn.w2 += &ffn.d_w2;
        grads.layers[l].ffn.b2 += &ffn.d_b2;
        let d_h_norm = &d_s2 + &ffn.d_x;

        let ln1 = layer_norm_backward(&d_h_norm, &p.ln1_gamma, &c.ln1);
        grads.layers[l].ln1_gamma += &ln1.d_gamma;
        grads.layers[l].ln1_beta += &ln1.d_beta;
        let d_s = ln1.d_x;

        // Fusion: s = h_self + λ·k per row, so dλ = Σ dS·k and dk = λ·Σ_rows dS.
        if let Some(gi) = c.fusion_gate {
            let k = ArrayView1::from(
                cache
                    .k_final
                    .as_deref()
                    .expect("fusion gate recorded implies k_final present"),
            );
            let lambda = self.params.gates[gi];
            let col_sum = d_s.sum_axis(Axis(0));
            grads.gates[gi] += col_sum.dot(&k);
            if let Some(dk) = d_k_final.as_deref_mut() {
                dk.scaled_add(lambda, &col_sum);
            }
        }
        let d_h_self = d_s;

        let mha = mha_backward(&d_h_self, &p.mha, &c.mha, self.config.n_heads);
        grads.layers[l].mha.w_qkv += &mha.d_w_qkv;
        grads.layers[l].mha.w_o += &mha.d_w_o;
        &d_h_self + &mha.d_x
    }

    // -- generation ---------------------------------------------------------

    /// Greedy decoding with a fixed knowledge vector. Emits until `eos`,
    /// `max_new_tokens`, or the context window fills; ties in the argmax go
    /// to the lowest token id. Returns prompt + continuation.
    pub fn generate_greedy(
        &self,
        prompt: &[u32],
        k_final: Option<&[f64]>,
        max_new_tokens: usize,
        eos: u32,
    ) -> Result<Vec<u32>, ModelError> {
        assert!(!prompt.is_empty(), "prompt must be non-empty");
        let mut seq = prompt.to_vec();
        for _ in 0..max_new_tokens {
            if seq.len() >= self.config.max_seq_len {
                break;
            }
            let out = self.forward(&seq, k_final)?;
            let last = out.logits.row(seq.len() - 1);
            let mut best = 0u32;
            let mut best_score = f64::NEG_INFINITY;
            for (tok, &score) in last.iter().enumerate() {
                if score > best_score {
                    best_score = score;
                    best = tok as u32;
                }
            }
            seq.push(best);
            if best == eos {
                break;
            }
        }
        Ok(seq)
    }
}

fn pool_mean_prefix(x: &Array2<f64>, query_len: usize) -> QueryRepresentation {
    let prefix = x.slice(ndarray::s![..query_len, ..]);
    let mean = prefix.sum_axis(Axis(0)) / query_len as f64;
    QueryRepresentation {
        h_query: mean.to_vec(),
        pooling: Pooling::MeanOverTokens,
    }
}
