//! Training objective: language-modeling loss, auxiliary attention loss,
//! combined gradients, and the Adam optimizer.
//!
//! The combined objective over a batch is
//! `total = lm + alpha · aux`, where `lm` pools negative log-likelihood over
//! every non-padding target position in the batch and `aux` averages the
//! per-example attention cross-entropy over the examples that carry a gold
//! candidate index. Gradients flow through the decoder, the knowledge
//! projections and gates; graph embedding tables stay frozen here (they are
//! trained by their own objective).

use super::tokenizer::{ANSWER_SEP, PAD};
use super::{Model, ModelError, ModelParams};
use crate::attention::{sparse_attention_backward, sparse_attention_forward, AttentionMode};
use crate::embed::EmbeddingStore;
use crate::ids::FactId;
use crate::store::GraphSnapshot;
use ndarray::Array2;

/// Numerically stable `ln Σ exp(x_i)`.
fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = xs.map(|x| (x - max).exp()).sum();
    max + sum.ln()
}

/// Mean negative log-likelihood of `targets` under `logits`, skipping
/// padding positions. Row `i` of `logits` scores the token at `targets[i]`.
pub fn lm_loss(logits: &Array2<f64>, targets: &[u32]) -> Result<f64, ModelError> {
    if logits.nrows() != targets.len() {
        return Err(ModelError::ShapeMismatch(format!(
            "{} logit rows vs {} targets",
            logits.nrows(),
            targets.len()
        )));
    }
    let vocab = logits.ncols();
    let mut sum = 0.0;
    let mut count = 0usize;
    for (row, &t) in logits.rows().into_iter().zip(targets) {
        if t == PAD {
            continue;
        }
        if t as usize >= vocab {
            return Err(ModelError::ShapeMismatch(format!(
                "target {t} outside vocabulary of {vocab}"
            )));
        }
        sum += log_sum_exp(row.iter().copied()) - row[t as usize];
        count += 1;
    }
    if count == 0 {
        return Err(ModelError::ShapeMismatch(
            "no non-padding target positions".into(),
        ));
    }
    Ok(sum / count as f64)
}

/// Cross-entropy between the pre-selection score distribution and a one-hot
/// gold indicator: `−log softmax(raw_scores)[gold]`.
pub fn aux_loss(raw_scores: &[f64], gold: &[f64]) -> Result<f64, ModelError> {
    if raw_scores.is_empty() || raw_scores.len() != gold.len() {
        return Err(ModelError::ShapeMismatch(format!(
            "{} scores vs {} gold entries",
            raw_scores.len(),
            gold.len()
        )));
    }
    let ones = gold.iter().filter(|&&g| g == 1.0).count();
    if ones != 1 || gold.iter().any(|&g| g != 0.0 && g != 1.0) {
        return Err(ModelError::NotOneHot);
    }
    let idx = gold.iter().position(|&g| g == 1.0).unwrap();
    Ok(log_sum_exp(raw_scores.iter().copied()) - raw_scores[idx])
}

/// One training example: a full token sequence (question, separator, answer,
/// end marker) plus the candidate facts retrieved for it and, when known,
/// which candidate answers the question.
#[derive(Debug, Clone)]
pub struct TrainExample {
    pub tokens: Vec<u32>,
    /// Candidate facts for knowledge attention; empty → knowledge-free pass.
    pub candidates: Vec<FactId>,
    /// Index into `candidates` of the fact that answers the question.
    pub gold: Option<usize>,
}

#[derive(Debug, Clone, Default)]
pub struct TrainBatch {
    pub examples: Vec<TrainExample>,
}

/// Loss values reported for one batch. `total_loss` is always the exact
/// expression `lm_loss + alpha·aux_loss` (or `lm_loss` when no example has
/// a gold label).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainingObjective {
    pub alpha: f64,
    pub lm_loss: f64,
    pub aux_loss: Option<f64>,
    pub total_loss: f64,
}

/// Forward + backward over a batch. Returns the objective and the gradient
/// accumulator (same shape as the parameters). `mode` picks sparse top-k or
/// dense knowledge attention for examples that carry candidates.
pub fn total_loss_and_grads(
    model: &Model,
    snapshot: &GraphSnapshot,
    embeddings: &EmbeddingStore,
    batch: &TrainBatch,
    alpha: f64,
    mode: AttentionMode,
) -> Result<(TrainingObjective, ModelParams), ModelError> {
    if alpha < 0.0 || !alpha.is_finite() {
        return Err(ModelError::InvalidConfig(format!(
            "alpha must be finite and non-negative, got {alpha}"
        )));
    }
    // Both pooled denominators are known before any forward pass.
    let mut target_count = 0usize;
    let mut gold_count = 0usize;
    for ex in &batch.examples {
        if ex.tokens.len() < 2 {
            return Err(ModelError::ShapeMismatch(
                "training example shorter than two tokens".into(),
            ));
        }
        target_count += ex.tokens[1..].iter().filter(|&&t| t != PAD).count();
        if let Some(g) = ex.gold {
            if ex.candidates.is_empty() {
                return Err(ModelError::ShapeMismatch(
                    "gold index without candidate facts".into(),
                ));
            }
            if g >= ex.candidates.len() {
                return Err(ModelError::ShapeMismatch(format!(
                    "gold index {g} out of {} candidates",
                    ex.candidates.len()
                )));
            }
            gold_count += 1;
        }
    }
    if target_count == 0 {
        return Err(ModelError::ShapeMismatch(
            "batch has no non-padding target positions".into(),
        ));
    }

    let mut grads = model.params.zeros_like();
    let mut lm_sum = 0.0;
    let mut aux_sum = 0.0;

    for ex in &batch.examples {
        let input = &ex.tokens[..ex.tokens.len() - 1];
        let targets = &ex.tokens[1..];
        // Pool the query representation over the question part only (up to
        // and including the answer separator), exactly the tokens that will
        // exist at inference time when knowledge is retrieved. Sequences
        // without a separator pool over everything.
        let query_len = input
            .iter()
            .position(|&t| t == ANSWER_SEP)
            .map_or(input.len(), |p| p + 1);

        let mut attn_pack = None;
        let mut attn_err = None;
        let out = model.forward_staged(input, query_len, |q| {
            if ex.candidates.is_empty() {
                return None;
            }
            match sparse_attention_forward(q, snapshot, &ex.candidates, embeddings, &model.params.attn, mode)
            {
                Ok((result, cache)) => {
                    let k = result.k_final.clone();
                    attn_pack = Some((result, cache));
                    Some(k)
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

        // LM term: softmax cross-entropy per non-padding position, pooled
        // over the whole batch.
        let mut d_logits = Array2::zeros(out.logits.dim());
        for (i, &t) in targets.iter().enumerate() {
            if t == PAD {
                continue;
            }
            let row = out.logits.row(i);
            let lse = log_sum_exp(row.iter().copied());
            lm_sum += lse - row[t as usize];
            let mut d_row = d_logits.row_mut(i);
            for (j, &z) in row.iter().enumerate() {
                d_row[j] = (z - lse).exp() / target_count as f64;
            }
            d_row[t as usize] -= 1.0 / target_count as f64;
        }

        let upper = model.backward_upper(&out.cache, &d_logits, &mut grads);

        match attn_pack {
            Some((result, cache)) => {
                let d_k_final = upper
                    .d_k_final
                    .clone()
                    .expect("knowledge consumed implies k gradient present");

                // Aux term on the pre-selection scores.
                let d_raw = if let Some(g) = ex.gold {
                    let mut onehot = vec![0.0; result.raw_scores.len()];
                    onehot[g] = 1.0;
                    aux_sum += aux_loss(&result.raw_scores, &onehot)?;
                    if alpha > 0.0 {
                        let lse = log_sum_exp(result.raw_scores.iter().copied());
                        let scale = alpha / gold_count as f64;
                        Some(
                            result
                                .raw_scores
                                .iter()
                                .enumerate()
                                .map(|(i, &s)| scale * ((s - lse).exp() - onehot[i]))
                                .collect::<Vec<f64>>(),
                        )
                    } else {
                        None
                    }
                } else {
                    None
                };

                let attn_grads = sparse_attention_backward(
                    &result,
                    &cache,
                    &model.params.attn,
                    d_k_final.as_slice().expect("contiguous gradient"),
                    d_raw.as_deref(),
                )?;
                grads.attn.w_q += &attn_grads.d_w_q;
                grads.attn.w_k += &attn_grads.d_w_k;
                grads.attn.w_v += &attn_grads.d_w_v;
                model.backward_lower(&out.cache, upper, Some(&attn_grads.d_query), &mut grads);
            }
            None => {
                model.backward_lower(&out.cache, upper, None, &mut grads);
            }
        }
    }

    let lm = lm_sum / target_count as f64;
    let aux = (gold_count > 0).then(|| aux_sum / gold_count as f64);
    let total_loss = match aux {
        Some(a) => lm + alpha * a,
        None => lm,
    };
    Ok((
        TrainingObjective {
            alpha,
            lm_loss: lm,
            aux_loss: aux,
            total_loss,
        },
        grads,
    ))
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

/// Adam with bias correction over the flattened parameter vector, in the
/// fixed canonical traversal order. Deterministic given a deterministic
/// gradient sequence; moments are not checkpointed.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global-norm gradient clip applied before the moment update; `None`
    /// disables it. Long runs sharpen the score distributions until a
    /// batch can produce a gradient spike that wrecks the run — the clip
    /// caps those without touching well-behaved steps.
    pub clip: Option<f64>,
    t: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamState {
    pub fn new(lr: f64) -> Self {
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip: None,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// Apply one update: `p ← p − lr·m̂/(√v̂ + eps)`.
    pub fn step(&mut self, params: &mut ModelParams, grads: &ModelParams) {
        let mut flat = Vec::with_capacity(self.m.len());
        grads.for_each(&mut |g| flat.push(g));
        if let Some(limit) = self.clip {
            let norm = flat.iter().map(|g| g * g).sum::<f64>().sqrt();
            if norm > limit {
                let scale = limit / norm;
                for g in &mut flat {
                    *g *= scale;
                }
            }
        }
        if self.m.is_empty() {
            self.m = vec![0.0; flat.len()];
            self.v = vec![0.0; flat.len()];
        }
        assert_eq!(self.m.len(), flat.len(), "parameter shape changed mid-run");
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let mut i = 0usize;
        params.for_each_mut(&mut |p| {
            let g = flat[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            *p -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            i += 1;
        });
        assert_eq!(i, flat.len());
    }
}

/// One optimization step over a batch; returns the batch objective.
pub fn train_step(
    model: &mut Model,
    snapshot: &GraphSnapshot,
    embeddings: &EmbeddingStore,
    batch: &TrainBatch,
    alpha: f64,
    mode: AttentionMode,
    adam: &mut AdamState,
) -> Result<TrainingObjective, ModelError> {
    let (objective, grads) = total_loss_and_grads(model, snapshot, embeddings, batch, alpha, mode)?;
    adam.step(&mut model.params, &grads);
    model.step += 1;
    Ok(objective)
}
