//! Fine-grained stage: score every candidate fact against the query
//! representation, hard-select the top-k, renormalize over the sparse set,
//! and aggregate the selected facts' values into one knowledge vector.
//!
//! ```text
//!   facts ──featurize──► F (M × 3·2·d_k)
//!                         │ ·W_k                 q (d_model)
//!                         ▼                       │ ·W_q
//!                        K (M × d_proj)  ◄─dot─► qp (d_proj)
//!                         │
//!                 raw_scores (M) ──top_k──► selected (≤ k)
//!                         │                     │ softmax
//!                         ▼                     ▼
//!            (kept for training)        weights ──Σ w_j · (f_j·W_v)──► k_final
//! ```
//!
//! Everything here is a pure function of its inputs; concurrent queries
//! share nothing mutable. The value projection runs **only over selected
//! rows** — with k ≪ M that is what makes the sparse path cheaper than
//! attending densely over all M candidates.

use crate::embed::EmbeddingStore;
use crate::ids::FactId;
use crate::store::GraphSnapshot;
use ndarray::{Array1, Array2, ArrayView1};
use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AttnError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("index {index} out of range for {len} candidates")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("candidate set is empty")]
    EmptyCandidates,
    #[error("missing embedding for {0}")]
    MissingEmbedding(String),
}

/// One candidate fact flattened to `[h; r; t]`: head and tail rows in
/// interleaved complex representation, the relation's phases materialized
/// as (cos θ, sin θ) pairs — dimension exactly 3·2·d_k.
#[derive(Debug, Clone)]
pub struct FactFeature {
    pub vector: Vec<f64>,
    pub fact_id: FactId,
}

/// Pooled decoder state that queries the knowledge store.
#[derive(Debug, Clone)]
pub struct QueryRepresentation {
    pub h_query: Vec<f64>,
    pub pooling: Pooling,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pooling {
    MeanOverTokens,
}

/// Projection weights for the knowledge-attention block.
#[derive(Debug, Clone)]
pub struct AttnProjections {
    /// d_model × d_proj
    pub w_q: Array2<f64>,
    /// (3·2·d_k) × d_proj
    pub w_k: Array2<f64>,
    /// (3·2·d_k) × d_model
    pub w_v: Array2<f64>,
    pub n_heads: usize,
    pub d_proj: usize,
}

pub const DEFAULT_N_HEADS: usize = 4;
pub const DEFAULT_D_PROJ: usize = 64;

impl AttnProjections {
    /// Xavier-uniform initialization from the caller's seeded generator.
    pub fn init(
        d_model: usize,
        d_k: usize,
        d_proj: usize,
        n_heads: usize,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(n_heads >= 1 && d_proj % n_heads == 0, "d_proj must divide into heads");
        let feat = 3 * 2 * d_k;
        let mut xavier = |rows: usize, cols: usize| {
            let bound = (6.0 / (rows + cols) as f64).sqrt();
            Array2::from_shape_fn((rows, cols), |_| rng.random_range(-bound..bound))
        };
        AttnProjections {
            w_q: xavier(d_model, d_proj),
            w_k: xavier(feat, d_proj),
            w_v: xavier(feat, d_model),
            n_heads,
            d_proj,
        }
    }

    pub fn d_model(&self) -> usize {
        self.w_q.nrows()
    }

    pub fn feature_dim(&self) -> usize {
        self.w_k.nrows()
    }

    fn check(&self) -> Result<(), AttnError> {
        if self.w_q.ncols() != self.d_proj
            || self.w_k.ncols() != self.d_proj
            || self.w_v.nrows() != self.w_k.nrows()
            || self.d_proj % self.n_heads != 0
        {
            return Err(AttnError::ShapeMismatch(format!(
                "projections disagree: W_q {:?}, W_k {:?}, W_v {:?}, d_proj {}, heads {}",
                self.w_q.dim(),
                self.w_k.dim(),
                self.w_v.dim(),
                self.d_proj,
                self.n_heads
            )));
        }
        Ok(())
    }
}

/// Result of one sparse attention pass. `raw_scores` are kept exactly as
/// computed before selection — the auxiliary training loss is defined over
/// them, not over the renormalized sparse weights.
#[derive(Debug, Clone)]
pub struct SparseAttentionResult {
    pub selected: Vec<FactId>,
    /// Positions of `selected` within the candidate list.
    pub selected_indices: Vec<usize>,
    pub weights: Vec<f64>,
    pub k_final: Vec<f64>,
    pub raw_scores: Vec<f64>,
}

// ---------------------------------------------------------------------------
// Featurization
// ---------------------------------------------------------------------------

/// Build one feature row per fact, in the order given. Features are built
/// fresh from the current embedding table on every call, so they can never
/// be stale with respect to embedding retraining.
pub fn featurize_facts(
    snapshot: &GraphSnapshot,
    facts: &[FactId],
    embeddings: &EmbeddingStore,
) -> Result<Vec<FactFeature>, AttnError> {
    let d_k = embeddings.d_k();
    embeddings.read(|tables| {
        let mut out = Vec::with_capacity(facts.len());
        for &fact_id in facts {
            let triplet = snapshot
                .fact(fact_id)
                .ok_or_else(|| AttnError::MissingEmbedding(format!("{fact_id:?} not live")))?;
            let h = tables
                .entity_row(triplet.head)
                .ok_or_else(|| AttnError::MissingEmbedding(format!("{:?}", triplet.head)))?;
            let phases = tables
                .relation_row(triplet.relation)
                .ok_or_else(|| AttnError::MissingEmbedding(format!("{:?}", triplet.relation)))?;
            let t = tables
                .entity_row(triplet.tail)
                .ok_or_else(|| AttnError::MissingEmbedding(format!("{:?}", triplet.tail)))?;
            let mut v = Vec::with_capacity(6 * d_k);
            v.extend_from_slice(h);
            for &theta in phases {
                v.push(theta.cos());
                v.push(theta.sin());
            }
            v.extend_from_slice(t);
            out.push(FactFeature { vector: v, fact_id });
        }
        Ok(out)
    })
}

/// Stack features into the M × (3·2·d_k) matrix the projections consume.
pub fn feature_matrix(feats: &[FactFeature], feat_dim: usize) -> Result<Array2<f64>, AttnError> {
    let mut f = Array2::zeros((feats.len(), feat_dim));
    for (i, feat) in feats.iter().enumerate() {
        if feat.vector.len() != feat_dim {
            return Err(AttnError::ShapeMismatch(format!(
                "feature {i} has dim {}, expected {feat_dim}",
                feat.vector.len()
            )));
        }
        f.row_mut(i).assign(&ArrayView1::from(&feat.vector));
    }
    Ok(f)
}

// ---------------------------------------------------------------------------
// Scoring and selection
// ---------------------------------------------------------------------------

/// Per-head scaled dot products between the projected query and each
/// projected fact, averaged into one scalar per fact.
///
/// Every head shares the scale 1/√(d_proj/n_heads), so the head average
/// algebraically equals one dot product over the full d_proj vector scaled
/// by 1/(n_heads·√(d_proj/n_heads)) — computed that way, with the head
/// structure kept explicit in [`attention_scores_per_head`].
pub fn attention_scores(
    q: &QueryRepresentation,
    feats: &[FactFeature],
    proj: &AttnProjections,
) -> Result<Vec<f64>, AttnError> {
    let per_head = attention_scores_per_head(q, feats, proj)?;
    Ok(per_head
        .rows()
        .into_iter()
        .map(|row| row.mean().expect("n_heads >= 1"))
        .collect())
}

/// The M × n_heads score matrix behind [`attention_scores`]. Exposed for
/// the per-head selection mode.
pub fn attention_scores_per_head(
    q: &QueryRepresentation,
    feats: &[FactFeature],
    proj: &AttnProjections,
) -> Result<Array2<f64>, AttnError> {
    proj.check()?;
    if q.h_query.len() != proj.d_model() {
        return Err(AttnError::ShapeMismatch(format!(
            "query dim {} vs W_q rows {}",
            q.h_query.len(),
            proj.d_model()
        )));
    }
    let f = feature_matrix(feats, proj.feature_dim())?;
    let qp = ArrayView1::from(&q.h_query).dot(&proj.w_q); // d_proj
    let k = f.dot(&proj.w_k); // M × d_proj
    let dh = proj.d_proj / proj.n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut scores = Array2::zeros((feats.len(), proj.n_heads));
    for i in 0..feats.len() {
        for h in 0..proj.n_heads {
            let lo = h * dh;
            let qh = qp.slice(ndarray::s![lo..lo + dh]);
            let kh = k.slice(ndarray::s![i, lo..lo + dh]);
            scores[[i, h]] = qh.dot(&kh) * scale;
        }
    }
    Ok(scores)
}

/// Indices of the `min(k, M)` largest scores, descending score, ties by
/// ascending index. Exact — a sort, not a sketch. `k > M` degrades to all
/// indices so tiny candidate sets behave like dense attention.
pub fn top_k_select(raw_scores: &[f64], k: usize) -> Vec<usize> {
    assert!(k >= 1, "k must be at least 1");
    let mut order: Vec<usize> = (0..raw_scores.len()).collect();
    order.sort_by(|&a, &b| raw_scores[b].total_cmp(&raw_scores[a]).then(a.cmp(&b)));
    order.truncate(k);
    order
}

/// Softmax over the selected scores only (max-subtracted), then the
/// weighted sum of the corresponding value rows.
///
/// `values` must hold one row per candidate (all M); the fused forward pass
/// avoids materializing unselected rows, but as a standalone operation this
/// takes the full matrix.
pub fn sparse_aggregate(
    raw_scores: &[f64],
    selected: &[usize],
    values: &Array2<f64>,
) -> Result<(Vec<f64>, Vec<f64>), AttnError> {
    assert!(!selected.is_empty(), "selection must be non-empty");
    if values.nrows() != raw_scores.len() {
        return Err(AttnError::ShapeMismatch(format!(
            "{} value rows for {} scores",
            values.nrows(),
            raw_scores.len()
        )));
    }
    for &i in selected {
        if i >= raw_scores.len() {
            return Err(AttnError::IndexOutOfRange {
                index: i,
                len: raw_scores.len(),
            });
        }
    }
    let weights = softmax_over(raw_scores, selected);
    let mut k_final = vec![0.0; values.ncols()];
    for (j, &i) in selected.iter().enumerate() {
        let row = values.row(i);
        for (out, &v) in k_final.iter_mut().zip(row.iter()) {
            *out += weights[j] * v;
        }
    }
    Ok((weights, k_final))
}

fn softmax_over(raw_scores: &[f64], selected: &[usize]) -> Vec<f64> {
    let max = selected
        .iter()
        .map(|&i| raw_scores[i])
        .fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = selected.iter().map(|&i| (raw_scores[i] - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

// ---------------------------------------------------------------------------
// Fused forward pass
// ---------------------------------------------------------------------------

/// How many candidates the aggregation attends over.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionMode {
    /// Top-k hard selection (the mechanism under study).
    Sparse { k: usize },
    /// Attend over all M candidates — the "no sparse selection" ablation.
    Dense,
}

/// Intermediate state the training backward pass needs. Forward-only
/// callers can drop it.
#[derive(Debug)]
pub struct AttnCache {
    pub features: Array2<f64>,
    pub query: Array1<f64>,
    pub projected_query: Array1<f64>,
    pub projected_keys: Array2<f64>,
}

/// Featurize → score → select → aggregate, with the value projection
/// applied lazily to selected rows only.
pub fn sparse_attention_forward(
    q: &QueryRepresentation,
    snapshot: &GraphSnapshot,
    facts: &[FactId],
    embeddings: &EmbeddingStore,
    proj: &AttnProjections,
    mode: AttentionMode,
) -> Result<(SparseAttentionResult, AttnCache), AttnError> {
    if facts.is_empty() {
        return Err(AttnError::EmptyCandidates);
    }
    let feats = featurize_facts(snapshot, facts, embeddings)?;
    forward_over_features(q, &feats, proj, mode)
}

/// The same pass over pre-built features (training reuses features across
/// the loss terms; benchmarks isolate the attend stage).
pub fn forward_over_features(
    q: &QueryRepresentation,
    feats: &[FactFeature],
    proj: &AttnProjections,
    mode: AttentionMode,
) -> Result<(SparseAttentionResult, AttnCache), AttnError> {
    if feats.is_empty() {
        return Err(AttnError::EmptyCandidates);
    }
    proj.check()?;
    if q.h_query.len() != proj.d_model() {
        return Err(AttnError::ShapeMismatch(format!(
            "query dim {} vs W_q rows {}",
            q.h_query.len(),
            proj.d_model()
        )));
    }
    let f = feature_matrix(feats, proj.feature_dim())?;
    let qp = ArrayView1::from(&q.h_query).dot(&proj.w_q);
    let k_mat = f.dot(&proj.w_k);
    let dh = proj.d_proj / proj.n_heads;
    let merged_scale = 1.0 / (proj.n_heads as f64 * (dh as f64).sqrt());
    let raw_scores: Vec<f64> = (0..feats.len())
        .map(|i| k_mat.row(i).dot(&qp) * merged_scale)
        .collect();

    let selected_indices = match mode {
        AttentionMode::Sparse { k } => top_k_select(&raw_scores, k),
        AttentionMode::Dense => (0..feats.len()).collect(),
    };
    let weights = softmax_over(&raw_scores, &selected_indices);

    // Lazy value projection: only selected feature rows touch W_v.
    let mut k_final = vec![0.0; proj.d_model()];
    for (j, &i) in selected_indices.iter().enumerate() {
        let v_row = f.row(i).dot(&proj.w_v);
        for (out, &v) in k_final.iter_mut().zip(v_row.iter()) {
            *out += weights[j] * v;
        }
    }

    let result = SparseAttentionResult {
        selected: selected_indices.iter().map(|&i| feats[i].fact_id).collect(),
        selected_indices: selected_indices.clone(),
        weights,
        k_final,
        raw_scores,
    };
    let cache = AttnCache {
        features: f,
        query: Array1::from(q.h_query.clone()),
        projected_query: qp,
        projected_keys: k_mat,
    };
    Ok((result, cache))
}

/// Per-head selection mode: each head picks its own top-k by its own
/// scores, aggregates over its own softmax, and the head outputs are
/// averaged. With one head this is exactly the merged path.
pub fn per_head_attention_forward(
    q: &QueryRepresentation,
    feats: &[FactFeature],
    proj: &AttnProjections,
    k: usize,
) -> Result<SparseAttentionResult, AttnError> {
    if feats.is_empty() {
        return Err(AttnError::EmptyCandidates);
    }
    let per_head = attention_scores_per_head(q, feats, proj)?;
    let f = feature_matrix(feats, proj.feature_dim())?;
    let mut k_final = vec![0.0; proj.d_model()];
    let mut union: Vec<usize> = Vec::new();
    for h in 0..proj.n_heads {
        let scores: Vec<f64> = per_head.column(h).to_vec();
        let sel = top_k_select(&scores, k);
        let w = softmax_over(&scores, &sel);
        for (j, &i) in sel.iter().enumerate() {
            let v_row = f.row(i).dot(&proj.w_v);
            for (out, &v) in k_final.iter_mut().zip(v_row.iter()) {
                *out += w[j] * v / proj.n_heads as f64;
            }
            if !union.contains(&i) {
                union.push(i);
            }
        }
    }
    union.sort_unstable();
    // Merged-scalar scores are still what training consumes; report them.
    let raw_scores: Vec<f64> = per_head
        .rows()
        .into_iter()
        .map(|row| row.mean().expect("n_heads >= 1"))
        .collect();
    let weights = softmax_over(&raw_scores, &union);
    Ok(SparseAttentionResult {
        selected: union.iter().map(|&i| feats[i].fact_id).collect(),
        selected_indices: union,
        weights,
        k_final,
        raw_scores,
    })
}

// ---------------------------------------------------------------------------
// Backward pass
// ---------------------------------------------------------------------------

/// Gradients of a scalar loss with respect to every attention input.
pub struct AttnGrads {
    pub d_w_q: Array2<f64>,
    pub d_w_k: Array2<f64>,
    pub d_w_v: Array2<f64>,
    pub d_query: Vec<f64>,
    /// M × feature_dim; row i is the gradient into fact i's feature vector
    /// (flows onward into embedding tables when that is enabled).
    pub d_features: Array2<f64>,
}

/// Backpropagate through the merged-mode forward pass.
///
/// * `d_k_final` — upstream gradient into the aggregated knowledge vector.
/// * `d_raw_scores` — upstream gradient applied directly to the
///   pre-selection scores (the auxiliary loss does this); may be zero.
///
/// Selection is treated as a constant index set: gradients flow through
/// the sparse softmax and the selected value rows only, plus whatever
/// `d_raw_scores` adds over all M.
pub fn sparse_attention_backward(
    result: &SparseAttentionResult,
    cache: &AttnCache,
    proj: &AttnProjections,
    d_k_final: &[f64],
    d_raw_scores: Option<&[f64]>,
) -> Result<AttnGrads, AttnError> {
    let m = result.raw_scores.len();
    let d_model = proj.d_model();
    if d_k_final.len() != d_model {
        return Err(AttnError::ShapeMismatch(format!(
            "d_k_final len {} vs d_model {d_model}",
            d_k_final.len()
        )));
    }
    if let Some(ds) = d_raw_scores {
        if ds.len() != m {
            return Err(AttnError::ShapeMismatch(format!(
                "d_raw_scores len {} vs M {m}",
                ds.len()
            )));
        }
    }
    let g_k = ArrayView1::from(d_k_final);
    let sel = &result.selected_indices;
    let w = &result.weights;

    let mut d_w_v = Array2::zeros(proj.w_v.dim());
    let mut d_features: Array2<f64> = Array2::zeros(cache.features.dim());
    // Through k_final = Σ_j w_j · (f_j · W_v):
    //   dV_j = w_j · g_k          dW_v += f_jᵀ dV_j      df_j += dV_j W_vᵀ
    //   dw_j = g_k · V_j
    let mut d_weights = vec![0.0; sel.len()];
    for (j, &i) in sel.iter().enumerate() {
        let f_row = cache.features.row(i);
        let v_row = f_row.dot(&proj.w_v);
        d_weights[j] = g_k.dot(&v_row);
        for (r, &fv) in f_row.iter().enumerate() {
            for (c, &gv) in g_k.iter().enumerate() {
                d_w_v[[r, c]] += fv * w[j] * gv;
            }
        }
        let df = proj.w_v.dot(&(g_k.to_owned() * w[j]));
        d_features.row_mut(i).scaled_add(1.0, &df);
    }

    // Sparse softmax Jacobian: ds_j = w_j (dw_j − Σ_l w_l dw_l).
    let mix: f64 = w.iter().zip(&d_weights).map(|(a, b)| a * b).sum();
    let mut d_scores = vec![0.0; m];
    for (j, &i) in sel.iter().enumerate() {
        d_scores[i] += w[j] * (d_weights[j] - mix);
    }
    if let Some(ds) = d_raw_scores {
        for (out, &v) in d_scores.iter_mut().zip(ds) {
            *out += v;
        }
    }

    // Through score_i = c · (f_i W_k) · (q W_q):
    //   dqp   = c · Σ_i ds_i K_i            dW_q = qᵀ ⊗ dqp     dq = W_q dqp
    //   dK_i  = c · ds_i · qp               dW_k = Fᵀ dK        dF += dK W_kᵀ
    let dh = proj.d_proj / proj.n_heads;
    let c = 1.0 / (proj.n_heads as f64 * (dh as f64).sqrt());
    let ds = Array1::from(d_scores);
    let d_qp = cache.projected_keys.t().dot(&ds) * c;
    let d_query = proj.w_q.dot(&d_qp).to_vec();
    let d_w_q = outer(&cache.query, &d_qp);
    let d_keys = outer(&ds, &cache.projected_query) * c; // M × d_proj
    let d_w_k = cache.features.t().dot(&d_keys);
    d_features += &d_keys.dot(&proj.w_k.t());

    Ok(AttnGrads {
        d_w_q,
        d_w_k,
        d_w_v,
        d_query,
        d_features,
    })
}

fn outer(a: &Array1<f64>, b: &Array1<f64>) -> Array2<f64> {
    let (n, m) = (a.len(), b.len());
    Array2::from_shape_fn((n, m), |(i, j)| a[i] * b[j])
}
