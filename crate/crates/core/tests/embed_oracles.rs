//! Embedding math verified against independent oracles: finite-difference
//! gradients, a from-scratch reimplementation of the retraining loss, and
//! the structural invariants of phase-encoded rotations.

use dynkg_core::embed::{
    embedding_gradient_check, rotate, score_triplet, EmbedError, EmbedTrainConfig, EmbeddingStore,
};
use dynkg_core::ids::{EntityId, RelationId, Triplet};
use dynkg_core::store::KgStore;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::f64::consts::TAU;

fn random_row(rng: &mut ChaCha8Rng, d_k: usize, scale: f64) -> Vec<f64> {
    (0..2 * d_k).map(|_| rng.random_range(-scale..scale)).collect()
}

fn random_phases(rng: &mut ChaCha8Rng, d_k: usize) -> Vec<f64> {
    (0..d_k).map(|_| rng.random_range(0.0..TAU)).collect()
}

// ---------------------------------------------------------------------------
// Structural invariants (10^4 random rows, 1e-12 tolerances)
// ---------------------------------------------------------------------------

#[test]
fn rotation_invariants_hold_over_many_random_rows() {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    for trial in 0..10_000 {
        let d_k = [2, 4, 8][trial % 3];
        let h = random_row(&mut rng, d_k, 2.0);
        let phases = random_phases(&mut rng, d_k);

        // Unit modulus at the complex materialization boundary.
        for &p in &phases {
            let modulus = (p.cos().powi(2) + p.sin().powi(2)).sqrt();
            assert!((modulus - 1.0).abs() <= 1e-12);
        }

        // Rotation preserves per-coordinate modulus.
        let hr = rotate(&h, &phases);
        for i in 0..d_k {
            let before = (h[2 * i].powi(2) + h[2 * i + 1].powi(2)).sqrt();
            let after = (hr[2 * i].powi(2) + hr[2 * i + 1].powi(2)).sqrt();
            assert!(
                (before - after).abs() <= 1e-12,
                "isometry violated: {before} vs {after}"
            );
        }

        // score(h, r, h∘r) = 0 exactly up to representation error.
        let exact = score_triplet(&h, &phases, &hr).unwrap();
        assert!(exact.abs() <= 1e-12, "rotation image must score 0, got {exact}");

        // Non-positivity for arbitrary tails.
        let t = random_row(&mut rng, d_k, 2.0);
        assert!(score_triplet(&h, &phases, &t).unwrap() <= 0.0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    /// Score is zero only at the rotation image: perturbing any coordinate
    /// strictly decreases it.
    #[test]
    fn score_zero_iff_exact_rotation_image(
        seed in 0u64..1_000_000,
        coord in 0usize..8,
        delta in prop_oneof![Just(1e-6), Just(-1e-3), Just(0.5)],
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d_k = 4;
        let h = random_row(&mut rng, d_k, 1.0);
        let phases = random_phases(&mut rng, d_k);
        let mut t = rotate(&h, &phases);
        prop_assert!(score_triplet(&h, &phases, &t).unwrap().abs() <= 1e-12);
        t[coord] += delta;
        prop_assert!(score_triplet(&h, &phases, &t).unwrap() < 0.0);
    }
}

// ---------------------------------------------------------------------------
// Gradient checking
// ---------------------------------------------------------------------------

#[test]
fn analytic_gradients_match_finite_differences() {
    // Error bound must hold across dimensionalities (same per-coordinate
    // math, so doubling d_k cannot change it).
    for d_k in [4usize, 200] {
        let mut rng = ChaCha8Rng::seed_from_u64(31 + d_k as u64);
        for _ in 0..20 {
            let h = random_row(&mut rng, d_k, 1.5);
            let phases = random_phases(&mut rng, d_k);
            let t = random_row(&mut rng, d_k, 1.5);
            let err = embedding_gradient_check(&h, &phases, &t, 1e-6).unwrap();
            assert!(err < 1e-5, "d_k={d_k}: gradient error {err}");
        }
    }
}

#[test]
fn gradient_check_rejects_the_kink() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let h = random_row(&mut rng, 4, 1.0);
    let phases = random_phases(&mut rng, 4);
    let t = rotate(&h, &phases); // every coordinate of h∘r − t is 0
    assert!(matches!(
        embedding_gradient_check(&h, &phases, &t, 1e-6),
        Err(EmbedError::NearSingularGradient { .. })
    ));
}

// ---------------------------------------------------------------------------
// Retraining
// ---------------------------------------------------------------------------

fn seeded_graph_with_embeddings(
    d_k: usize,
    seed: u64,
) -> (KgStore, EmbeddingStore, Vec<Triplet>) {
    let graph = KgStore::new();
    let embeds = EmbeddingStore::new(d_k, seed);
    for i in 0..10 {
        graph.add_entity(&format!("e{i}"), "node").unwrap();
    }
    for i in 0..3 {
        graph.add_relation(&format!("r{i}")).unwrap();
    }
    let mut facts = Vec::new();
    for (h, r, t, ts) in [
        (0u32, 0u32, 1u32, 10i64),
        (1, 1, 2, 20),
        (2, 0, 3, 30),
        (3, 2, 4, 40),
        (4, 1, 5, 50),
        (5, 0, 6, 60),
        (6, 2, 7, 70),
        (7, 0, 8, 80),
        (8, 1, 9, 90),
        (9, 2, 0, 100),
    ] {
        graph
            .add_fact(EntityId(h), RelationId(r), EntityId(t), ts)
            .unwrap();
        let f = Triplet {
            head: EntityId(h),
            relation: RelationId(r),
            tail: EntityId(t),
            timestamp_ms: ts,
        };
        embeds.init_for_fact(&f);
        facts.push(f);
    }
    (graph, embeds, facts)
}

/// Independent reimplementation of the documented loss for one full-batch
/// pass, mirroring the published sampling schedule.
fn oracle_first_step_loss(
    embeds: &EmbeddingStore,
    facts: &[Triplet],
    cfg: &EmbedTrainConfig,
    seed: u64,
) -> f64 {
    let sigmoid = |x: f64| 1.0 / (1.0 + (-x).exp());
    let dist = |h: &[f64], phases: &[f64], t: &[f64]| -> f64 {
        let mut d = 0.0;
        for i in 0..phases.len() {
            let re = h[2 * i] * phases[i].cos() - h[2 * i + 1] * phases[i].sin() - t[2 * i];
            let im = h[2 * i] * phases[i].sin() + h[2 * i + 1] * phases[i].cos() - t[2 * i + 1];
            d += (re * re + im * im).sqrt();
        }
        d
    };
    let row = |e: EntityId| embeds.entity_row(e).unwrap();
    let phases = |r: RelationId| embeds.relation_phases(r).unwrap();

    // Candidates: ascending ids of embedded entities (all 10 here).
    let candidates: Vec<u32> = (0..10).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for pos in facts {
        let d_pos = dist(&row(pos.head), &phases(pos.relation), &row(pos.tail));
        let mut loss = -sigmoid(cfg.margin - d_pos).ln();
        let mut neg_dists = Vec::new();
        for _ in 0..cfg.negatives_per_positive {
            let corrupt_tail = rng.random_range(0..2u32) == 0;
            let original = if corrupt_tail { pos.tail.0 } else { pos.head.0 };
            let mut replacement = candidates[rng.random_range(0..candidates.len())];
            let mut tries = 0;
            while replacement == original && tries < 16 {
                replacement = candidates[rng.random_range(0..candidates.len())];
                tries += 1;
            }
            let (h, t) = if corrupt_tail {
                (pos.head, EntityId(replacement))
            } else {
                (EntityId(replacement), pos.tail)
            };
            neg_dists.push(dist(&row(h), &phases(pos.relation), &row(t)));
        }
        // Adversarial weights, computed the naive way (no max subtraction).
        let exps: Vec<f64> = neg_dists
            .iter()
            .map(|d| (-cfg.adversarial_temperature * d).exp())
            .collect();
        let z: f64 = exps.iter().sum();
        for (j, d) in neg_dists.iter().enumerate() {
            loss -= (exps[j] / z) * sigmoid(d - cfg.margin).ln();
        }
        total += loss;
    }
    total / facts.len() as f64
}

#[test]
fn first_step_loss_matches_independent_oracle() {
    let (graph, embeds, facts) = seeded_graph_with_embeddings(8, 1234);
    let cfg = EmbedTrainConfig {
        steps_per_retrain: 1,
        ..Default::default()
    };
    let expected = oracle_first_step_loss(&embeds, &facts, &cfg, 77);
    let curve = embeds
        .retrain(&graph.snapshot(), &cfg, (i64::MIN, i64::MAX), 77)
        .unwrap();
    assert_eq!(curve.len(), 1);
    let rel = (curve[0] - expected).abs() / expected.abs().max(1.0);
    assert!(
        rel < 1e-10,
        "retrain loss {} vs oracle {} (rel {rel})",
        curve[0],
        expected
    );
}

#[test]
fn retraining_improves_the_trained_fact() {
    let (graph, embeds, _) = seeded_graph_with_embeddings(8, 99);
    // A fact between two already-embedded entities: generic position, so its
    // distance starts well away from zero.
    let f = Triplet {
        head: EntityId(0),
        relation: RelationId(1),
        tail: EntityId(7),
        timestamp_ms: 5000,
    };
    graph.add_fact(f.head, f.relation, f.tail, f.timestamp_ms).unwrap();
    embeds.init_for_fact(&f);
    let before = embeds.score_fact(&f).unwrap();
    assert!(before < -0.05, "fact should start imperfect, got {before}");

    let cfg = EmbedTrainConfig {
        margin: 2.0,
        learning_rate: 0.25,
        steps_per_retrain: 60,
        ..Default::default()
    };
    // Window selects only this fact.
    let curve = embeds
        .retrain(&graph.snapshot(), &cfg, (5000, 5000), 3)
        .unwrap();
    let after = embeds.score_fact(&f).unwrap();
    assert!(
        after > before + 0.01,
        "score should improve: {before} -> {after}"
    );
    let head = curve.iter().take(10).sum::<f64>() / 10.0;
    let tail = curve.iter().rev().take(10).sum::<f64>() / 10.0;
    assert!(tail < head, "smoothed loss should trend down: {head} -> {tail}");
}

#[test]
fn retraining_is_deterministic_per_seed() {
    let run = || {
        let (graph, embeds, _) = seeded_graph_with_embeddings(8, 7);
        let cfg = EmbedTrainConfig {
            steps_per_retrain: 10,
            ..Default::default()
        };
        let curve = embeds
            .retrain(&graph.snapshot(), &cfg, (i64::MIN, i64::MAX), 21)
            .unwrap();
        (curve, embeds.entity_row(EntityId(3)).unwrap())
    };
    let (curve_a, row_a) = run();
    let (curve_b, row_b) = run();
    // Bit-identical, not merely close.
    assert_eq!(curve_a, curve_b);
    assert_eq!(row_a, row_b);
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let (_, embeds, _) = seeded_graph_with_embeddings(8, 424242);
    let p1 = dir.path().join("embed1.ckpt");
    let p2 = dir.path().join("embed2.ckpt");
    embeds.save(&p1).unwrap();
    embeds.save(&p2).unwrap();
    assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());

    let loaded = EmbeddingStore::load(&p1, 0).unwrap();
    assert_eq!(loaded.d_k(), embeds.d_k());
    assert_eq!(loaded.version(), embeds.version());
    for i in 0..10 {
        assert_eq!(
            loaded.entity_row(EntityId(i)),
            embeds.entity_row(EntityId(i)),
            "entity row {i}"
        );
    }
    for i in 0..3 {
        assert_eq!(
            loaded.relation_phases(RelationId(i)),
            embeds.relation_phases(RelationId(i))
        );
    }
    let p3 = dir.path().join("embed3.ckpt");
    loaded.save(&p3).unwrap();
    assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p3).unwrap());

    // Corruption is detected.
    let mut bytes = std::fs::read(&p1).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0xff;
    std::fs::write(&p2, &bytes).unwrap();
    assert!(matches!(
        EmbeddingStore::load(&p2, 0),
        Err(EmbedError::Corrupt(_))
    ));
}
