//! Complex-valued rotational embeddings for entities and relations.
//!
//! Entities are vectors in C^{d_k}, stored as `2·d_k` interleaved reals
//! `[re_0, im_0, re_1, im_1, …]`. Relations are *phase vectors* θ ∈ R^{d_k}:
//! the realized complex relation value is `r_i = exp(i·θ_i)`, so the
//! unit-modulus constraint `|r_i| = 1` holds structurally — phases are the
//! trainable parameters and no projection step exists.
//!
//! Plausibility of a fact `(h, r, t)` is
//!
//! ```text
//!   score = −‖ h ∘ r − t ‖₁      (∘ = element-wise complex product,
//!                                  ‖z‖₁ = Σ_i sqrt(re_i² + im_i²))
//! ```
//!
//! which is ≤ 0 everywhere and 0 exactly when t is the rotation image of h.
//!
//! New facts get embedding rows immediately at ingest time (see
//! [`EmbeddingStore::init_for_fact`]): a new tail is placed *at* the rotation
//! image of its head (score 0), so freshly ingested facts are retrievable by
//! embedding-space scoring before any retraining happens. Retraining runs
//! against a store snapshot off to the side and publishes the updated table
//! atomically, so concurrent readers never observe a half-updated table.

use crate::ids::{EntityId, RelationId, Triplet};
use crate::store::GraphSnapshot;
use crate::util::Fnv64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;
use std::f64::consts::TAU;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::{Mutex, RwLock};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("no embedding row for {0}")]
    MissingRow(String),
    #[error(
        "gradient check rejected: coordinate modulus {modulus:.3e} below 10·epsilon \
         (the L1 norm is not differentiable at zero coordinates)"
    )]
    NearSingularGradient { modulus: f64 },
    #[error("retraining window selected no facts")]
    EmptyWindow,
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("checkpoint I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint is corrupt: {0}")]
    Corrupt(String),
}

// ---------------------------------------------------------------------------
// Pure scoring math
// ---------------------------------------------------------------------------

fn check_dims(h: &[f64], phases: &[f64], t: &[f64]) -> Result<usize, EmbedError> {
    let d_k = phases.len();
    for v in [h, t] {
        if v.len() != 2 * d_k {
            return Err(EmbedError::DimensionMismatch {
                expected: 2 * d_k,
                got: v.len(),
            });
        }
    }
    Ok(d_k)
}

/// Rotational triplet score `−‖h∘r − t‖₁` with `r_i = exp(i·θ_i)`.
///
/// `h` and `t` are interleaved complex vectors of length `2·d_k`; `phases`
/// has length `d_k`. Always ≤ 0; equals 0 iff `t = h∘r` exactly.
pub fn score_triplet(h: &[f64], phases: &[f64], t: &[f64]) -> Result<f64, EmbedError> {
    let d_k = check_dims(h, phases, t)?;
    let mut dist = 0.0;
    for i in 0..d_k {
        let (a, b) = (h[2 * i], h[2 * i + 1]);
        let (c, s) = (phases[i].cos(), phases[i].sin());
        let p = a * c - b * s - t[2 * i];
        let q = a * s + b * c - t[2 * i + 1];
        dist += (p * p + q * q).sqrt();
    }
    Ok(-dist)
}

/// Analytic gradients of [`score_triplet`] with respect to every input
/// coordinate. Returns `(d_score/dh, d_score/dphases, d_score/dt,
/// min_coordinate_modulus)`; coordinates of `h∘r − t` with modulus below
/// `subgrad_floor` contribute zero gradient (the L1 norm has a kink there,
/// and zero is a valid subgradient choice for optimization).
pub fn score_gradients(
    h: &[f64],
    phases: &[f64],
    t: &[f64],
    subgrad_floor: f64,
) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>, f64), EmbedError> {
    let d_k = check_dims(h, phases, t)?;
    let mut gh = vec![0.0; 2 * d_k];
    let mut gphi = vec![0.0; d_k];
    let mut gt = vec![0.0; 2 * d_k];
    let mut min_modulus = f64::INFINITY;
    for i in 0..d_k {
        let (a, b) = (h[2 * i], h[2 * i + 1]);
        let (c, s) = (phases[i].cos(), phases[i].sin());
        let hr_re = a * c - b * s;
        let hr_im = a * s + b * c;
        let p = hr_re - t[2 * i];
        let q = hr_im - t[2 * i + 1];
        let m = (p * p + q * q).sqrt();
        min_modulus = min_modulus.min(m);
        if m < subgrad_floor {
            continue;
        }
        // score = −Σ m_i; with unit vectors (p/m, q/m):
        //   ∂m/∂a = ( p·c + q·s)/m          ∂m/∂b = (−p·s + q·c)/m
        //   ∂m/∂u = −p/m                    ∂m/∂v = −q/m
        //   ∂m/∂θ = (−p·hr_im + q·hr_re)/m
        let (pu, qu) = (p / m, q / m);
        gh[2 * i] = -(pu * c + qu * s);
        gh[2 * i + 1] = -(-pu * s + qu * c);
        gt[2 * i] = pu;
        gt[2 * i + 1] = qu;
        gphi[i] = -(-pu * hr_im + qu * hr_re);
    }
    Ok((gh, gphi, gt, min_modulus))
}

/// Compare analytic score gradients against central finite differences at
/// step `epsilon`; returns the maximum relative error over all coordinates.
/// Per-coordinate error is `|a − n| / max(|a|, |n|, 1)` — relative for
/// O(1) gradients, absolute below that, so the roundoff floor of the
/// difference quotient (≈ |score|·ε_machine/epsilon) cannot inflate the
/// report on coordinates whose true gradient happens to be tiny.
///
/// Rejects inputs where any coordinate of `h∘r − t` has modulus below
/// `10·epsilon`: near the L1 kink the finite-difference quotient is
/// meaningless and the comparison would report spurious error.
pub fn embedding_gradient_check(
    h: &[f64],
    phases: &[f64],
    t: &[f64],
    epsilon: f64,
) -> Result<f64, EmbedError> {
    assert!(epsilon > 0.0, "epsilon must be positive");
    let (gh, gphi, gt, min_modulus) = score_gradients(h, phases, t, 0.0)?;
    if min_modulus < 10.0 * epsilon {
        return Err(EmbedError::NearSingularGradient {
            modulus: min_modulus,
        });
    }

    let rel = |analytic: f64, numeric: f64| {
        (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1.0)
    };
    let mut max_rel: f64 = 0.0;

    let mut hx = h.to_vec();
    for (i, &g) in gh.iter().enumerate() {
        let orig = hx[i];
        hx[i] = orig + epsilon;
        let plus = score_triplet(&hx, phases, t)?;
        hx[i] = orig - epsilon;
        let minus = score_triplet(&hx, phases, t)?;
        hx[i] = orig;
        max_rel = max_rel.max(rel(g, (plus - minus) / (2.0 * epsilon)));
    }
    let mut px = phases.to_vec();
    for (i, &g) in gphi.iter().enumerate() {
        let orig = px[i];
        px[i] = orig + epsilon;
        let plus = score_triplet(h, &px, t)?;
        px[i] = orig - epsilon;
        let minus = score_triplet(h, &px, t)?;
        px[i] = orig;
        max_rel = max_rel.max(rel(g, (plus - minus) / (2.0 * epsilon)));
    }
    let mut tx = t.to_vec();
    for (i, &g) in gt.iter().enumerate() {
        let orig = tx[i];
        tx[i] = orig + epsilon;
        let plus = score_triplet(h, phases, &tx)?;
        tx[i] = orig - epsilon;
        let minus = score_triplet(h, phases, &tx)?;
        tx[i] = orig;
        max_rel = max_rel.max(rel(g, (plus - minus) / (2.0 * epsilon)));
    }
    Ok(max_rel)
}

/// `h ∘ r` for a phase-encoded relation: rotates each complex coordinate of
/// `h` by the corresponding phase.
pub fn rotate(h: &[f64], phases: &[f64]) -> Vec<f64> {
    debug_assert_eq!(h.len(), 2 * phases.len());
    let mut out = vec![0.0; h.len()];
    for i in 0..phases.len() {
        let (a, b) = (h[2 * i], h[2 * i + 1]);
        let (c, s) = (phases[i].cos(), phases[i].sin());
        out[2 * i] = a * c - b * s;
        out[2 * i + 1] = a * s + b * c;
    }
    out
}

/// `t ∘ conj(r)`: the inverse rotation, used to place a new head entity from
/// an existing tail.
pub fn rotate_back(t: &[f64], phases: &[f64]) -> Vec<f64> {
    let neg: Vec<f64> = phases.iter().map(|p| -p).collect();
    rotate(t, &neg)
}

// ---------------------------------------------------------------------------
// Training config
// ---------------------------------------------------------------------------

/// Hyperparameters for the periodic embedding fine-tune.
#[derive(Clone, Debug)]
pub struct EmbedTrainConfig {
    /// Margin γ of the self-adversarial margin loss.
    pub margin: f64,
    /// Negative samples drawn per positive fact.
    pub negatives_per_positive: usize,
    /// SGD step size.
    pub learning_rate: f64,
    /// Optimization steps per retrain call. Zero is a permitted no-op (the
    /// table is untouched and the loss curve is empty).
    pub steps_per_retrain: usize,
    /// Temperature of the self-adversarial negative weighting; 0 weights all
    /// negatives uniformly.
    pub adversarial_temperature: f64,
}

impl Default for EmbedTrainConfig {
    fn default() -> Self {
        EmbedTrainConfig {
            margin: 9.0,
            negatives_per_positive: 16,
            learning_rate: 0.05,
            steps_per_retrain: 100,
            adversarial_temperature: 1.0,
        }
    }
}

impl EmbedTrainConfig {
    pub fn validate(&self) -> Result<(), EmbedError> {
        if !(self.margin > 0.0) {
            return Err(EmbedError::InvalidConfig("margin must be > 0".into()));
        }
        if self.negatives_per_positive == 0 {
            return Err(EmbedError::InvalidConfig(
                "negatives_per_positive must be >= 1".into(),
            ));
        }
        if !(self.learning_rate > 0.0) {
            return Err(EmbedError::InvalidConfig("learning_rate must be > 0".into()));
        }
        if !(self.adversarial_temperature >= 0.0) {
            return Err(EmbedError::InvalidConfig(
                "adversarial_temperature must be >= 0".into(),
            ));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// The table
// ---------------------------------------------------------------------------

/// Dense embedding rows indexed by id. Rows exist only for objects that have
/// appeared in at least one fact (initialization happens at fact-ingest
/// time), so presence flags accompany the data.
pub(crate) struct Tables {
    pub(crate) d_k: usize,
    entity: Vec<f64>,
    entity_present: Vec<bool>,
    relation: Vec<f64>,
    relation_present: Vec<bool>,
    version: u64,
}

impl Tables {
    fn new(d_k: usize) -> Self {
        Tables {
            d_k,
            entity: Vec::new(),
            entity_present: Vec::new(),
            relation: Vec::new(),
            relation_present: Vec::new(),
            version: 0,
        }
    }

    pub(crate) fn entity_row(&self, id: EntityId) -> Option<&[f64]> {
        let i = id.index();
        if *self.entity_present.get(i)? {
            Some(&self.entity[i * 2 * self.d_k..(i + 1) * 2 * self.d_k])
        } else {
            None
        }
    }

    pub(crate) fn relation_row(&self, id: RelationId) -> Option<&[f64]> {
        let i = id.index();
        if *self.relation_present.get(i)? {
            Some(&self.relation[i * self.d_k..(i + 1) * self.d_k])
        } else {
            None
        }
    }

    fn grow_entities(&mut self, upto: usize) {
        if self.entity_present.len() <= upto {
            self.entity_present.resize(upto + 1, false);
            self.entity.resize((upto + 1) * 2 * self.d_k, 0.0);
        }
    }

    fn grow_relations(&mut self, upto: usize) {
        if self.relation_present.len() <= upto {
            self.relation_present.resize(upto + 1, false);
            self.relation.resize((upto + 1) * self.d_k, 0.0);
        }
    }

    fn set_entity_row(&mut self, id: EntityId, row: &[f64]) {
        debug_assert_eq!(row.len(), 2 * self.d_k);
        self.grow_entities(id.index());
        let base = id.index() * 2 * self.d_k;
        self.entity[base..base + 2 * self.d_k].copy_from_slice(row);
        self.entity_present[id.index()] = true;
    }

    fn set_relation_row(&mut self, id: RelationId, row: &[f64]) {
        debug_assert_eq!(row.len(), self.d_k);
        self.grow_relations(id.index());
        let base = id.index() * self.d_k;
        self.relation[base..base + self.d_k].copy_from_slice(row);
        self.relation_present[id.index()] = true;
    }

    fn present_entities(&self) -> Vec<u32> {
        self.entity_present
            .iter()
            .enumerate()
            .filter_map(|(i, p)| p.then_some(i as u32))
            .collect()
    }
}

/// Thread-safe owner of the embedding tables.
///
/// Reads take a brief shared lock; the single writer (fact initialization,
/// serialized with the store writer) and the retrain publish step take the
/// exclusive lock for microseconds. Retraining itself runs on a private copy
/// and never holds the lock, so queries proceed at full speed during a
/// retrain and observe either the old or the new table, never a mixture.
pub struct EmbeddingStore {
    inner: RwLock<Tables>,
    rng: Mutex<ChaCha8Rng>,
}

impl EmbeddingStore {
    pub fn new(d_k: usize, seed: u64) -> Self {
        assert!(d_k > 0, "d_k must be positive");
        EmbeddingStore {
            inner: RwLock::new(Tables::new(d_k)),
            rng: Mutex::new(ChaCha8Rng::seed_from_u64(seed)),
        }
    }

    pub fn d_k(&self) -> usize {
        self.read(|t| t.d_k)
    }

    /// Monotone table version; bumps whenever any row is added or replaced.
    pub fn version(&self) -> u64 {
        self.read(|t| t.version)
    }

    pub(crate) fn read<R>(&self, f: impl FnOnce(&Tables) -> R) -> R {
        f(&self.inner.read().expect("embedding table lock poisoned"))
    }

    fn write<R>(&self, f: impl FnOnce(&mut Tables) -> R) -> R {
        f(&mut self.inner.write().expect("embedding table lock poisoned"))
    }

    pub fn has_entity_row(&self, id: EntityId) -> bool {
        self.read(|t| t.entity_row(id).is_some())
    }

    pub fn has_relation_row(&self, id: RelationId) -> bool {
        self.read(|t| t.relation_row(id).is_some())
    }

    /// Copy of an entity's interleaved complex row.
    pub fn entity_row(&self, id: EntityId) -> Option<Vec<f64>> {
        self.read(|t| t.entity_row(id).map(|r| r.to_vec()))
    }

    /// Copy of a relation's phase row.
    pub fn relation_phases(&self, id: RelationId) -> Option<Vec<f64>> {
        self.read(|t| t.relation_row(id).map(|r| r.to_vec()))
    }

    /// Score a fact from the current table.
    pub fn score_fact(&self, fact: &Triplet) -> Result<f64, EmbedError> {
        self.read(|t| {
            let h = t
                .entity_row(fact.head)
                .ok_or_else(|| EmbedError::MissingRow(format!("{:?}", fact.head)))?;
            let r = t
                .relation_row(fact.relation)
                .ok_or_else(|| EmbedError::MissingRow(format!("{:?}", fact.relation)))?;
            let tl = t
                .entity_row(fact.tail)
                .ok_or_else(|| EmbedError::MissingRow(format!("{:?}", fact.tail)))?;
            score_triplet(h, r, tl)
        })
    }

    /// Create embedding rows for any object of `fact` that lacks one.
    /// Idempotent for already-embedded ids.
    ///
    /// Placement rules: a missing relation gets phases uniform in [0, 2π).
    /// Then, if the head row exists and the tail's doesn't, the tail is
    /// placed at the head's rotation image (the new fact scores exactly 0);
    /// symmetrically a missing head is placed at the tail's inverse rotation.
    /// If both are missing, each coordinate gets a uniform random phase with
    /// modulus 1/√d_k.
    pub fn init_for_fact(&self, fact: &Triplet) {
        let mut rng = self.rng.lock().expect("embedding rng lock poisoned");
        self.write(|t| {
            let d_k = t.d_k;
            let mut changed = false;
            if t.relation_row(fact.relation).is_none() {
                let phases: Vec<f64> = (0..d_k).map(|_| rng.random_range(0.0..TAU)).collect();
                t.set_relation_row(fact.relation, &phases);
                changed = true;
            }
            let head_known = t.entity_row(fact.head).is_some();
            let tail_known = t.entity_row(fact.tail).is_some();
            match (head_known, tail_known) {
                (true, true) => {}
                (true, false) => {
                    let h = t.entity_row(fact.head).unwrap().to_vec();
                    let r = t.relation_row(fact.relation).unwrap().to_vec();
                    t.set_entity_row(fact.tail, &rotate(&h, &r));
                    changed = true;
                }
                (false, true) => {
                    let tl = t.entity_row(fact.tail).unwrap().to_vec();
                    let r = t.relation_row(fact.relation).unwrap().to_vec();
                    t.set_entity_row(fact.head, &rotate_back(&tl, &r));
                    changed = true;
                }
                (false, false) => {
                    let modulus = 1.0 / (d_k as f64).sqrt();
                    let mut sample = || -> Vec<f64> {
                        let mut row = vec![0.0; 2 * d_k];
                        for i in 0..d_k {
                            let phi = rng.random_range(0.0..TAU);
                            row[2 * i] = modulus * phi.cos();
                            row[2 * i + 1] = modulus * phi.sin();
                        }
                        row
                    };
                    let head_row = sample();
                    t.set_entity_row(fact.head, &head_row);
                    if fact.tail != fact.head {
                        let tail_row = sample();
                        t.set_entity_row(fact.tail, &tail_row);
                    }
                    changed = true;
                }
            }
            if changed {
                t.version += 1;
            }
        });
    }

    /// Initialize rows for every live fact of `snapshot` that lacks them, in
    /// ascending fact-id order. Used to reconcile after reloading a store
    /// whose embedding checkpoint predates the log tail.
    pub fn init_missing_from(&self, snapshot: &GraphSnapshot) {
        for (_, fact) in snapshot.live_facts() {
            self.init_for_fact(&fact);
        }
    }

    /// Give `id` a random unit-modulus row if it has none. Entities that
    /// participate in no fact yet still need a row once their name enters a
    /// vocabulary (the row backs the lifted token embedding).
    pub fn ensure_entity_row(&self, id: EntityId) {
        let mut rng = self.rng.lock().expect("embedding rng lock poisoned");
        self.write(|t| {
            if t.entity_row(id).is_some() {
                return;
            }
            let d_k = t.d_k;
            let modulus = 1.0 / (d_k as f64).sqrt();
            let mut row = vec![0.0; 2 * d_k];
            for i in 0..d_k {
                let phi = rng.random_range(0.0..TAU);
                row[2 * i] = modulus * phi.cos();
                row[2 * i + 1] = modulus * phi.sin();
            }
            t.set_entity_row(id, &row);
            t.version += 1;
        });
    }

    // -- retraining ---------------------------------------------------------

    /// Fine-tune embeddings on live facts whose timestamp falls in
    /// `window = [start, end]` (inclusive), using self-adversarial negative
    /// sampling with margin:
    ///
    /// ```text
    ///   L = −ln σ(γ − d(pos)) − Σ_j w_j · ln σ(d(neg_j) − γ)
    ///   w_j = softmax_j( −τ · d(neg_j) )          (treated as constants)
    /// ```
    ///
    /// with `d = ‖h∘r − t‖₁`, full-batch SGD over the window, one loss value
    /// appended per step. Runs on a private copy of the table and publishes
    /// the merged result atomically at the end.
    ///
    /// Sampling schedule (fixed, so an external oracle can reproduce it):
    /// facts are visited in ascending fact-id order; for each positive,
    /// `negatives_per_positive` negatives are drawn in sequence — first an
    /// even/odd draw from `random_range(0..2)` choosing tail (0) or head (1)
    /// corruption, then `random_range(0..candidates)` over the ascending list
    /// of embedded entity ids, redrawn up to 16 times while it equals the
    /// entity being replaced.
    pub fn retrain(
        &self,
        snapshot: &GraphSnapshot,
        config: &EmbedTrainConfig,
        window: (i64, i64),
        seed: u64,
    ) -> Result<Vec<f64>, EmbedError> {
        config.validate()?;
        let facts: Vec<Triplet> = snapshot
            .live_facts()
            .map(|(_, t)| t)
            .filter(|t| t.timestamp_ms >= window.0 && t.timestamp_ms <= window.1)
            .collect();
        if facts.is_empty() {
            return Err(EmbedError::EmptyWindow);
        }
        if config.steps_per_retrain == 0 {
            return Ok(Vec::new());
        }

        // Private working copy of the rows we may touch (snapshot of the
        // whole table; cheap at desk scale).
        let (d_k, mut work) = self.read(|t| (t.d_k, WorkingCopy::from_tables(t)));
        let candidates = work.present_entities.clone();
        if candidates.len() < 2 {
            return Err(EmbedError::InvalidConfig(
                "need at least 2 embedded entities to sample negatives".into(),
            ));
        }
        for f in &facts {
            if !work.entities.contains_key(&f.head.0) || !work.entities.contains_key(&f.tail.0) {
                return Err(EmbedError::MissingRow(format!("{:?}", f)));
            }
            if !work.relations.contains_key(&f.relation.0) {
                return Err(EmbedError::MissingRow(format!("{:?}", f.relation)));
            }
        }

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut curve = Vec::with_capacity(config.steps_per_retrain);
        let inv_n = 1.0 / facts.len() as f64;
        for _ in 0..config.steps_per_retrain {
            let mut ent_grads: HashMap<u32, Vec<f64>> = HashMap::new();
            let mut rel_grads: HashMap<u32, Vec<f64>> = HashMap::new();
            let mut loss = 0.0;
            for pos in &facts {
                // Positive term.
                let (d_pos, gh, gphi, gt) = work.distance_grads(pos, d_k);
                loss -= sigmoid(config.margin - d_pos).ln();
                let coeff = sigmoid(d_pos - config.margin) * inv_n;
                axpy(ent_grads.entry(pos.head.0).or_insert_with(|| vec![0.0; 2 * d_k]), coeff, &gh);
                axpy(rel_grads.entry(pos.relation.0).or_insert_with(|| vec![0.0; d_k]), coeff, &gphi);
                axpy(ent_grads.entry(pos.tail.0).or_insert_with(|| vec![0.0; 2 * d_k]), coeff, &gt);

                // Negatives: corrupt one side, weight by adversarial softmax.
                let mut negs = Vec::with_capacity(config.negatives_per_positive);
                for _ in 0..config.negatives_per_positive {
                    let corrupt_tail = rng.random_range(0..2u32) == 0;
                    let original = if corrupt_tail { pos.tail.0 } else { pos.head.0 };
                    let mut replacement = candidates[rng.random_range(0..candidates.len())];
                    let mut tries = 0;
                    while replacement == original && tries < 16 {
                        replacement = candidates[rng.random_range(0..candidates.len())];
                        tries += 1;
                    }
                    let neg = if corrupt_tail {
                        Triplet { tail: EntityId(replacement), ..*pos }
                    } else {
                        Triplet { head: EntityId(replacement), ..*pos }
                    };
                    negs.push(neg);
                }
                let dists: Vec<f64> = negs.iter().map(|n| work.distance(n, d_k)).collect();
                let weights = adversarial_weights(&dists, config.adversarial_temperature);
                for (j, neg) in negs.iter().enumerate() {
                    loss -= weights[j] * sigmoid(dists[j] - config.margin).ln();
                    let (_, gh, gphi, gt) = work.distance_grads(neg, d_k);
                    let coeff = -weights[j] * sigmoid(config.margin - dists[j]) * inv_n;
                    axpy(ent_grads.entry(neg.head.0).or_insert_with(|| vec![0.0; 2 * d_k]), coeff, &gh);
                    axpy(rel_grads.entry(neg.relation.0).or_insert_with(|| vec![0.0; d_k]), coeff, &gphi);
                    axpy(ent_grads.entry(neg.tail.0).or_insert_with(|| vec![0.0; 2 * d_k]), coeff, &gt);
                }
            }
            for (id, g) in &ent_grads {
                let row = work.entities.get_mut(id).expect("graded row exists");
                axpy(row, -config.learning_rate, g);
            }
            for (id, g) in &rel_grads {
                let row = work.relations.get_mut(id).expect("graded row exists");
                axpy(row, -config.learning_rate, g);
            }
            curve.push(loss * inv_n);
        }

        // Publish: replace trained rows in the live table. Rows initialized
        // by concurrent ingests during the retrain are left untouched.
        self.write(|t| {
            let mut touched: Vec<&u32> = work.entities.keys().collect();
            touched.sort_unstable();
            for id in touched {
                t.set_entity_row(EntityId(*id), &work.entities[id]);
            }
            let mut touched: Vec<&u32> = work.relations.keys().collect();
            touched.sort_unstable();
            for id in touched {
                t.set_relation_row(RelationId(*id), &work.relations[id]);
            }
            t.version += 1;
        });
        Ok(curve)
    }

    // -- checkpointing ------------------------------------------------------

    /// Serialize the table to `path`. Deterministic bytes; FNV-checksummed.
    pub fn save(&self, path: &Path) -> Result<(), EmbedError> {
        self.read(|t| {
            let file = std::fs::File::create(path)?;
            let mut w = CheckWriter::new(BufWriter::new(file));
            w.put(b"DKEM")?;
            w.put_u32(1)?; // format version
            w.put_u64(t.d_k as u64)?;
            w.put_u64(t.entity_present.len() as u64)?;
            w.put_u64(t.relation_present.len() as u64)?;
            w.put_u64(t.version)?;
            for &p in &t.entity_present {
                w.put(&[p as u8])?;
            }
            for (i, &p) in t.entity_present.iter().enumerate() {
                if p {
                    for v in &t.entity[i * 2 * t.d_k..(i + 1) * 2 * t.d_k] {
                        w.put(&v.to_le_bytes())?;
                    }
                }
            }
            for &p in &t.relation_present {
                w.put(&[p as u8])?;
            }
            for (i, &p) in t.relation_present.iter().enumerate() {
                if p {
                    for v in &t.relation[i * t.d_k..(i + 1) * t.d_k] {
                        w.put(&v.to_le_bytes())?;
                    }
                }
            }
            w.finish()?;
            Ok(())
        })
    }

    /// Load a checkpoint written by [`EmbeddingStore::save`]. The returned
    /// store continues the RNG stream from `seed` for future initializations.
    pub fn load(path: &Path, seed: u64) -> Result<Self, EmbedError> {
        let bytes = std::fs::read(path)?;
        if bytes.len() < 12 + 8 || &bytes[0..4] != b"DKEM" {
            return Err(EmbedError::Corrupt("bad checkpoint magic".into()));
        }
        let body = &bytes[..bytes.len() - 8];
        let stored = u64::from_le_bytes(bytes[bytes.len() - 8..].try_into().unwrap());
        let mut h = Fnv64::new();
        h.update(body);
        if h.finish() != stored {
            return Err(EmbedError::Corrupt("checkpoint checksum mismatch".into()));
        }
        let mut pos = 4usize;
        let get_u32 = |pos: &mut usize| -> Result<u32, EmbedError> {
            let v = body
                .get(*pos..*pos + 4)
                .ok_or_else(|| EmbedError::Corrupt("truncated".into()))?;
            *pos += 4;
            Ok(u32::from_le_bytes(v.try_into().unwrap()))
        };
        let version_fmt = get_u32(&mut pos)?;
        if version_fmt != 1 {
            return Err(EmbedError::Corrupt(format!(
                "unsupported checkpoint version {version_fmt}"
            )));
        }
        let get_u64 = |pos: &mut usize| -> Result<u64, EmbedError> {
            let v = body
                .get(*pos..*pos + 8)
                .ok_or_else(|| EmbedError::Corrupt("truncated".into()))?;
            *pos += 8;
            Ok(u64::from_le_bytes(v.try_into().unwrap()))
        };
        let d_k = get_u64(&mut pos)? as usize;
        let n_ent = get_u64(&mut pos)? as usize;
        let n_rel = get_u64(&mut pos)? as usize;
        let table_version = get_u64(&mut pos)?;
        if d_k == 0 {
            return Err(EmbedError::Corrupt("d_k must be positive".into()));
        }

        let mut t = Tables::new(d_k);
        t.version = table_version;
        let take = |pos: &mut usize, n: usize| -> Result<&[u8], EmbedError> {
            let v = body
                .get(*pos..*pos + n)
                .ok_or_else(|| EmbedError::Corrupt("truncated".into()))?;
            *pos += n;
            Ok(v)
        };
        let ent_present: Vec<bool> = take(&mut pos, n_ent)?.iter().map(|&b| b != 0).collect();
        if n_ent > 0 {
            t.grow_entities(n_ent - 1);
        }
        for (i, &p) in ent_present.iter().enumerate() {
            if p {
                let mut row = vec![0.0; 2 * d_k];
                for v in row.iter_mut() {
                    *v = f64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap());
                }
                t.set_entity_row(EntityId(i as u32), &row);
            }
        }
        let rel_present: Vec<bool> = take(&mut pos, n_rel)?.iter().map(|&b| b != 0).collect();
        if n_rel > 0 {
            t.grow_relations(n_rel - 1);
        }
        for (i, &p) in rel_present.iter().enumerate() {
            if p {
                let mut row = vec![0.0; d_k];
                for v in row.iter_mut() {
                    *v = f64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap());
                }
                t.set_relation_row(RelationId(i as u32), &row);
            }
        }
        if pos != body.len() {
            return Err(EmbedError::Corrupt("trailing bytes".into()));
        }
        Ok(EmbeddingStore {
            inner: RwLock::new(t),
            rng: Mutex::new(ChaCha8Rng::seed_from_u64(seed)),
        })
    }
}

/// Adversarial softmax over negative distances: `softmax_j(−τ·d_j)`.
/// τ = 0 degenerates to uniform weights.
fn adversarial_weights(dists: &[f64], temperature: f64) -> Vec<f64> {
    let logits: Vec<f64> = dists.iter().map(|d| -temperature * d).collect();
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| e / sum).collect()
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn axpy(acc: &mut [f64], a: f64, x: &[f64]) {
    debug_assert_eq!(acc.len(), x.len());
    for (dst, &src) in acc.iter_mut().zip(x) {
        *dst += a * src;
    }
}

/// Mutable sparse copy of the table used during retraining.
struct WorkingCopy {
    entities: HashMap<u32, Vec<f64>>,
    relations: HashMap<u32, Vec<f64>>,
    present_entities: Vec<u32>,
}

impl WorkingCopy {
    fn from_tables(t: &Tables) -> Self {
        let present_entities = t.present_entities();
        let mut entities = HashMap::with_capacity(present_entities.len());
        for &id in &present_entities {
            entities.insert(id, t.entity_row(EntityId(id)).unwrap().to_vec());
        }
        let mut relations = HashMap::new();
        for (i, &p) in t.relation_present.iter().enumerate() {
            if p {
                relations.insert(
                    i as u32,
                    t.relation_row(RelationId(i as u32)).unwrap().to_vec(),
                );
            }
        }
        WorkingCopy {
            entities,
            relations,
            present_entities,
        }
    }

    fn distance(&self, f: &Triplet, _d_k: usize) -> f64 {
        let h = &self.entities[&f.head.0];
        let r = &self.relations[&f.relation.0];
        let t = &self.entities[&f.tail.0];
        -score_triplet(h, r, t).expect("dims consistent")
    }

    /// `(d, ∂d/∂h, ∂d/∂θ, ∂d/∂t)` with the lenient zero subgradient at kinks.
    fn distance_grads(&self, f: &Triplet, _d_k: usize) -> (f64, Vec<f64>, Vec<f64>, Vec<f64>) {
        let h = &self.entities[&f.head.0];
        let r = &self.relations[&f.relation.0];
        let t = &self.entities[&f.tail.0];
        let d = -score_triplet(h, r, t).expect("dims consistent");
        let (mut gh, mut gphi, mut gt, _) =
            score_gradients(h, r, t, 1e-12).expect("dims consistent");
        // score_gradients returns ∇score = −∇d.
        for v in gh.iter_mut().chain(gphi.iter_mut()).chain(gt.iter_mut()) {
            *v = -*v;
        }
        (d, gh, gphi, gt)
    }
}

struct CheckWriter<W: Write> {
    sink: W,
    hash: Fnv64,
}

impl<W: Write> CheckWriter<W> {
    fn new(sink: W) -> Self {
        CheckWriter {
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
    fn finish(mut self) -> std::io::Result<()> {
        let sum = self.hash.finish();
        self.sink.write_all(&sum.to_le_bytes())?;
        self.sink.flush()
    }
}
