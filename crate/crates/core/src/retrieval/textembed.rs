//! Feature-hashed character n-gram text embedding.
//!
//! Deterministic by construction: lowercase the text, slide 3/4/5-character
//! windows over it, hash each window into one of `d_h` buckets with a sign
//! bit, accumulate, and L2-normalize. Shared character n-grams push two
//! texts' vectors together, which is all the coarse retrieval stage needs.

use super::{DenseTextEmbedding, RetrievalError};
use crate::util::fnv1a64;

/// Default embedding width; every description and query shares one space.
pub const DEFAULT_TEXT_DIM: usize = 256;

/// Embed `text` into a unit vector of dimension `d_h`.
///
/// Texts shorter than the smallest window (3 characters) contribute their
/// whole character sequence as a single feature, so any non-empty text maps
/// to a valid unit vector. In the astronomically unlikely event that signed
/// features cancel to an exactly zero vector, the bucket addressed by the
/// text hash is set to 1 instead — the unit-norm invariant is unconditional.
pub fn embed_text(text: &str, d_h: usize) -> Result<DenseTextEmbedding, RetrievalError> {
    assert!(d_h > 0, "embedding dimension must be positive");
    if text.is_empty() {
        return Err(RetrievalError::EmptyText);
    }
    let lowered: Vec<char> = text.to_lowercase().chars().collect();
    let source_text_hash = fnv1a64(text.as_bytes());

    let mut v = vec![0.0f64; d_h];
    let mut buf = String::new();
    let mut add_gram = |chars: &[char], v: &mut [f64]| {
        buf.clear();
        buf.extend(chars);
        let h = fnv1a64(buf.as_bytes());
        // Low bits pick the bucket; an independent high bit picks the sign.
        let bucket = (h % d_h as u64) as usize;
        let sign = if (h >> 32) & 1 == 0 { 1.0 } else { -1.0 };
        v[bucket] += sign;
    };

    if lowered.len() < 3 {
        add_gram(&lowered, &mut v);
    } else {
        for n in 3..=5usize {
            if lowered.len() < n {
                break;
            }
            for window in lowered.windows(n) {
                add_gram(window, &mut v);
            }
        }
    }

    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        v[(source_text_hash % d_h as u64) as usize] = 1.0;
    } else {
        for x in &mut v {
            *x /= norm;
        }
    }
    Ok(DenseTextEmbedding {
        vector: v,
        source_text_hash,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::retrieval::coarse_score;

    #[test]
    fn embedding_is_deterministic() {
        let a = embed_text("Solar Power Plant", DEFAULT_TEXT_DIM).unwrap();
        let b = embed_text("Solar Power Plant", DEFAULT_TEXT_DIM).unwrap();
        assert_eq!(a.vector, b.vector);
        assert_eq!(a.source_text_hash, b.source_text_hash);
    }

    #[test]
    fn output_is_unit_length() {
        for text in ["a", "ab", "abc", "a much longer sentence with words", "ααβ"] {
            let e = embed_text(text, DEFAULT_TEXT_DIM).unwrap();
            let norm = e.vector.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() <= 1e-9, "{text:?}: norm {norm}");
        }
    }

    #[test]
    fn empty_text_is_rejected() {
        assert!(matches!(embed_text("", 64), Err(RetrievalError::EmptyText)));
    }

    #[test]
    fn casing_does_not_matter() {
        let a = embed_text("Reactor Four", DEFAULT_TEXT_DIM).unwrap();
        let b = embed_text("reactor four", DEFAULT_TEXT_DIM).unwrap();
        assert_eq!(a.vector, b.vector);
    }

    #[test]
    fn shared_ngrams_force_similarity_ordering() {
        let q = embed_text("solar power plant", DEFAULT_TEXT_DIM).unwrap();
        let close = embed_text("solar energy station", DEFAULT_TEXT_DIM).unwrap();
        let far = embed_text("baroque violin concerto", DEFAULT_TEXT_DIM).unwrap();
        let s_close = coarse_score(&q, &close).unwrap();
        let s_far = coarse_score(&q, &far).unwrap();
        assert!(
            s_close > s_far,
            "expected {s_close} (shared n-grams) > {s_far}"
        );
    }
}
