//! Question-answering evaluation: exact match and token-level F1.
//!
//! Exact match compares whitespace-normalized strings; token F1 is the
//! harmonic mean of multiset token precision and recall, averaged over
//! questions. Both are reported as percentages, and per-question records
//! are kept so reports can be diffed and audited.

use std::collections::HashMap;

/// Collapse runs of whitespace and trim the ends.
pub fn normalize_answer(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Whether prediction and gold match exactly after whitespace normalization.
pub fn exact_match(prediction: &str, gold: &str) -> bool {
    normalize_answer(prediction) == normalize_answer(gold)
}

/// Multiset token overlap F1 in [0, 1]. Empty prediction or empty gold
/// scores 0 unless both are empty (vacuous perfect match).
pub fn token_f1(prediction: &str, gold: &str) -> f64 {
    let pred: Vec<&str> = prediction.split_whitespace().collect();
    let gold_toks: Vec<&str> = gold.split_whitespace().collect();
    if pred.is_empty() && gold_toks.is_empty() {
        return 1.0;
    }
    if pred.is_empty() || gold_toks.is_empty() {
        return 0.0;
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for t in &gold_toks {
        *counts.entry(t).or_insert(0) += 1;
    }
    let mut overlap = 0usize;
    for t in &pred {
        if let Some(c) = counts.get_mut(t) {
            if *c > 0 {
                *c -= 1;
                overlap += 1;
            }
        }
    }
    if overlap == 0 {
        return 0.0;
    }
    let precision = overlap as f64 / pred.len() as f64;
    let recall = overlap as f64 / gold_toks.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuestionRecord {
    pub question: String,
    pub gold: String,
    pub predicted: String,
    pub exact: bool,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    /// Which split this report covers ("seen", "unseen", …).
    pub split: String,
    /// Percentage of exact matches.
    pub exact_match: f64,
    /// Mean token F1, as a percentage.
    pub token_f1: f64,
    pub records: Vec<QuestionRecord>,
}

impl EvalReport {
    /// Score a list of (question, gold, predicted) triples.
    pub fn from_pairs<'a>(
        split: &str,
        rows: impl IntoIterator<Item = (&'a str, &'a str, &'a str)>,
    ) -> EvalReport {
        let mut records = Vec::new();
        for (question, gold, predicted) in rows {
            records.push(QuestionRecord {
                question: question.to_string(),
                gold: gold.to_string(),
                predicted: predicted.to_string(),
                exact: exact_match(predicted, gold),
                f1: token_f1(predicted, gold),
            });
        }
        let n = records.len().max(1) as f64;
        let em = records.iter().filter(|r| r.exact).count() as f64 / n * 100.0;
        let f1 = records.iter().map(|r| r.f1).sum::<f64>() / n * 100.0;
        EvalReport {
            split: split.to_string(),
            exact_match: em,
            token_f1: f1,
            records,
        }
    }

    /// Serialize per-question records as line-delimited machine-readable
    /// rows (tab-separated: exact, f1, question, gold, predicted).
    pub fn machine_rows(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&format!(
                "{}\t{:.6}\t{}\t{}\t{}\n",
                u8::from(r.exact),
                r.f1,
                r.question,
                r.gold,
                r.predicted
            ));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn whitespace_is_normalized_before_matching() {
        assert!(exact_match("  e00042 ", "e00042"));
        assert!(exact_match("a \t b", "a b"));
        assert!(!exact_match("e00042", "e00043"));
    }

    #[test]
    fn all_correct_predictions_score_one_hundred() {
        let rows = vec![("q1", "a", "a"), ("q2", "b c", "b c")];
        let report = EvalReport::from_pairs("seen", rows.iter().map(|&(q, g, p)| (q, g, p)));
        assert_eq!(report.exact_match, 100.0);
        assert_eq!(report.token_f1, 100.0);
    }

    #[test]
    fn partial_overlap_matches_the_formula() {
        // Prediction "a b" vs gold "a": precision 1/2, recall 1 → F1 = 2/3.
        let f1 = token_f1("a b", "a");
        assert!((f1 - 2.0 / 3.0).abs() < 1e-12);
        assert!(!exact_match("a b", "a"));
    }

    #[test]
    fn multiset_counting_caps_repeated_tokens() {
        // Gold has one "a"; predicting it twice only counts once.
        let f1 = token_f1("a a", "a");
        assert!((f1 - 2.0 * (0.5 * 1.0) / (0.5 + 1.0)).abs() < 1e-12);
        assert_eq!(token_f1("x y", "a b"), 0.0);
        assert_eq!(token_f1("", "a"), 0.0);
        assert_eq!(token_f1("", ""), 1.0);
    }

    #[test]
    fn exact_match_never_exceeds_f1_per_record() {
        let rows = [
            ("q1", "e00001", "e00001"),
            ("q2", "e00002", "e00009"),
            ("q3", "a b", "a"),
            ("q4", "x", ""),
        ];
        let report = EvalReport::from_pairs("unseen", rows.iter().map(|&(q, g, p)| (q, g, p)));
        for r in &report.records {
            assert!(f64::from(u8::from(r.exact)) <= r.f1 + 1e-12);
        }
        assert!(report.exact_match <= report.token_f1 + 1e-9);
    }

    #[test]
    fn twenty_question_fixture_matches_hand_scores() {
        // 20 rows: 8 exact, 2 half-overlap (F1 2/3), 10 misses.
        let mut rows = Vec::new();
        for i in 0..8 {
            rows.push((format!("q{i}"), "t".to_string(), "t".to_string()));
        }
        for i in 8..10 {
            rows.push((format!("q{i}"), "t".to_string(), "t u".to_string()));
        }
        for i in 10..20 {
            rows.push((format!("q{i}"), "t".to_string(), "w".to_string()));
        }
        let report = EvalReport::from_pairs(
            "seen",
            rows.iter().map(|(q, g, p)| (q.as_str(), g.as_str(), p.as_str())),
        );
        assert_eq!(report.records.len(), 20);
        assert!((report.exact_match - 40.0).abs() < 1e-12);
        let expected_f1 = (8.0 + 2.0 * (2.0 / 3.0)) / 20.0 * 100.0;
        assert!((report.token_f1 - expected_f1).abs() < 1e-9);
        assert_eq!(report.machine_rows().lines().count(), 20);
    }
}
