//! Synthetic temporal-QA dataset generation.
//!
//! Builds a random knowledge graph whose facts carry timestamps on either
//! side of a split point, plus template questions ("what is the R of H ?" →
//! tail name) tagged with the fact that answers them. Head/relation pairs
//! are globally unique, so a question about a post-split fact is provably
//! unanswerable from pre-split facts alone — the property the
//! assimilation experiments rely on.
//!
//! Everything is deterministic per seed, including the emitted files.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("infeasible dataset config: {0}")]
    InfeasibleConfig(String),
    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

#[derive(Debug, Clone)]
pub struct SyntheticConfig {
    pub seed: u64,
    pub n_entities: usize,
    pub n_relations: usize,
    pub n_facts: usize,
    pub n_qa: usize,
    /// Fraction of QA pairs whose gold fact is dated after the split.
    pub unseen_fraction: f64,
    /// Facts at or before this timestamp are "seen"; after it, "unseen".
    pub split_time_ms: i64,
    /// Extra two-hop composition questions (0 disables the mode).
    pub n_two_hop: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            seed: 42,
            n_entities: 500,
            n_relations: 8,
            n_facts: 2000,
            n_qa: 200,
            unseen_fraction: 0.2,
            split_time_ms: 1_000_000,
            n_two_hop: 0,
        }
    }
}

/// One generated fact; indices refer into the entity/relation name lists.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SynthFact {
    pub head: u32,
    pub relation: u32,
    pub tail: u32,
    pub timestamp_ms: i64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QaPair {
    pub question: String,
    pub answer: String,
    /// Position of the gold fact in the global fact ordering (seen facts in
    /// timestamp order, then unseen facts in timestamp order) — the same
    /// order an ingest of the two fact files assigns ids in.
    pub gold_fact: u32,
    pub timestamp_ms: i64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub entities: Vec<(String, String)>,
    pub relations: Vec<String>,
    /// Global ordering: `facts[..n_seen_facts]` are seen, the rest unseen,
    /// each block sorted by timestamp.
    pub facts: Vec<SynthFact>,
    pub n_seen_facts: usize,
    pub qa_seen: Vec<QaPair>,
    pub qa_unseen: Vec<QaPair>,
    pub qa_two_hop: Vec<QaPair>,
}

pub fn entity_name(i: usize) -> String {
    format!("e{i:05}")
}

pub fn relation_name(i: usize) -> String {
    format!("rel{i:03}")
}

fn question_for(relation: &str, head: &str) -> String {
    format!("what is the {relation} of {head} ?")
}

impl SyntheticDataset {
    pub fn generate(cfg: &SyntheticConfig) -> Result<Self, DataError> {
        if cfg.n_entities < 2 || cfg.n_relations == 0 || cfg.n_facts == 0 || cfg.n_qa == 0 {
            return Err(DataError::InfeasibleConfig(
                "entity, relation, fact, and QA counts must be positive (≥2 entities)".into(),
            ));
        }
        if !(0.0..=1.0).contains(&cfg.unseen_fraction) {
            return Err(DataError::InfeasibleConfig(format!(
                "unseen_fraction {} outside [0, 1]",
                cfg.unseen_fraction
            )));
        }
        if cfg.split_time_ms < 1 {
            return Err(DataError::InfeasibleConfig(
                "split_time_ms must be at least 1".into(),
            ));
        }
        let n_unseen_qa = (cfg.n_qa as f64 * cfg.unseen_fraction).round() as usize;
        let n_seen_qa = cfg.n_qa - n_unseen_qa;
        if n_unseen_qa > cfg.n_facts || n_seen_qa > cfg.n_facts - n_unseen_qa {
            return Err(DataError::InfeasibleConfig(format!(
                "{} QA pairs cannot all have distinct gold facts among {} facts",
                cfg.n_qa, cfg.n_facts
            )));
        }

        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

        let entities: Vec<(String, String)> = (0..cfg.n_entities)
            .map(|i| {
                let name = entity_name(i);
                let desc = format!(
                    "{name} {name} sector s{:02} shelf {:03}",
                    i % 89,
                    i % 997
                );
                (name, desc)
            })
            .collect();
        let relations: Vec<String> = (0..cfg.n_relations).map(relation_name).collect();

        // Head/relation pairs are unique across the whole dataset, so every
        // question has exactly one answering fact — and unseen questions
        // have none among the seen facts.
        let mut used_pairs: HashSet<(u32, u32)> = HashSet::new();
        let mut raw_facts: Vec<(u32, u32, u32)> = Vec::with_capacity(cfg.n_facts);
        let mut attempts = 0usize;
        let attempt_cap = 50 * cfg.n_facts + 1000;
        while raw_facts.len() < cfg.n_facts {
            attempts += 1;
            if attempts > attempt_cap {
                return Err(DataError::InfeasibleConfig(format!(
                    "could not place {} facts with unique head/relation pairs \
                     over {} entities × {} relations after {} attempts",
                    cfg.n_facts, cfg.n_entities, cfg.n_relations, attempts - 1
                )));
            }
            let h = rng.random_range(0..cfg.n_entities as u32);
            let r = rng.random_range(0..cfg.n_relations as u32);
            let t = rng.random_range(0..cfg.n_entities as u32);
            if t == h || !used_pairs.insert((h, r)) {
                continue;
            }
            raw_facts.push((h, r, t));
        }

        // The last n_unseen_qa accepted facts become the unseen block.
        let n_unseen_facts = n_unseen_qa;
        let n_seen_facts = cfg.n_facts - n_unseen_facts;
        let mut seen: Vec<SynthFact> = raw_facts[..n_seen_facts]
            .iter()
            .map(|&(h, r, t)| SynthFact {
                head: h,
                relation: r,
                tail: t,
                timestamp_ms: rng.random_range(1..=cfg.split_time_ms),
            })
            .collect();
        let mut unseen: Vec<SynthFact> = raw_facts[n_seen_facts..]
            .iter()
            .map(|&(h, r, t)| SynthFact {
                head: h,
                relation: r,
                tail: t,
                timestamp_ms: rng.random_range(cfg.split_time_ms + 1..=2 * cfg.split_time_ms),
            })
            .collect();
        seen.sort_by_key(|f| f.timestamp_ms);
        unseen.sort_by_key(|f| f.timestamp_ms);
        let mut facts = seen;
        facts.extend(unseen.iter().copied());

        let qa_from = |f: &SynthFact, idx: usize| QaPair {
            question: question_for(
                &relations[f.relation as usize],
                &entities[f.head as usize].0,
            ),
            answer: entities[f.tail as usize].0.clone(),
            gold_fact: idx as u32,
            timestamp_ms: f.timestamp_ms,
        };

        let mut seen_indices: Vec<usize> = (0..n_seen_facts).collect();
        seen_indices.shuffle(&mut rng);
        seen_indices.truncate(n_seen_qa);
        seen_indices.sort_unstable();
        let qa_seen: Vec<QaPair> = seen_indices
            .iter()
            .map(|&i| qa_from(&facts[i], i))
            .collect();
        let qa_unseen: Vec<QaPair> = (n_seen_facts..cfg.n_facts)
            .map(|i| qa_from(&facts[i], i))
            .collect();

        // Optional two-hop composition questions over seen facts:
        // "what is the R2 of the R1 of H ?" follows H --R1--> M --R2--> T.
        let mut qa_two_hop = Vec::new();
        if cfg.n_two_hop > 0 {
            let mut by_head: HashMap<u32, Vec<usize>> = HashMap::new();
            for (i, f) in facts[..n_seen_facts].iter().enumerate() {
                by_head.entry(f.head).or_default().push(i);
            }
            'outer: for (i, first) in facts[..n_seen_facts].iter().enumerate() {
                if let Some(seconds) = by_head.get(&first.tail) {
                    for &j in seconds {
                        if j == i {
                            continue;
                        }
                        let second = &facts[j];
                        qa_two_hop.push(QaPair {
                            question: format!(
                                "what is the {} of the {} of {} ?",
                                relations[second.relation as usize],
                                relations[first.relation as usize],
                                entities[first.head as usize].0
                            ),
                            answer: entities[second.tail as usize].0.clone(),
                            gold_fact: j as u32,
                            timestamp_ms: second.timestamp_ms.max(first.timestamp_ms),
                        });
                        if qa_two_hop.len() == cfg.n_two_hop {
                            break 'outer;
                        }
                    }
                }
            }
            if qa_two_hop.len() < cfg.n_two_hop {
                return Err(DataError::InfeasibleConfig(format!(
                    "only {} two-hop chains exist, {} requested",
                    qa_two_hop.len(),
                    cfg.n_two_hop
                )));
            }
        }

        Ok(SyntheticDataset {
            entities,
            relations,
            facts,
            n_seen_facts,
            qa_seen,
            qa_unseen,
            qa_two_hop,
        })
    }

    pub fn seen_facts(&self) -> &[SynthFact] {
        &self.facts[..self.n_seen_facts]
    }

    pub fn unseen_facts(&self) -> &[SynthFact] {
        &self.facts[self.n_seen_facts..]
    }

    /// Lines covering every surface form the tokenizer must know: the
    /// question template words, entity names, and relation names.
    pub fn vocab_corpus(&self) -> Vec<String> {
        let mut lines = vec!["what is the of ?".to_string()];
        lines.extend(self.entities.iter().map(|(n, _)| n.clone()));
        lines.extend(self.relations.iter().cloned());
        lines
    }

    fn facts_tsv(&self, range: std::ops::Range<usize>) -> String {
        let mut out = String::new();
        for f in &self.facts[range] {
            writeln!(
                out,
                "{}\t{}\t{}\t{}",
                self.entities[f.head as usize].0,
                self.relations[f.relation as usize],
                self.entities[f.tail as usize].0,
                f.timestamp_ms
            )
            .expect("string write");
        }
        out
    }

    fn qa_tsv(pairs: &[QaPair]) -> String {
        let mut out = String::new();
        for qa in pairs {
            writeln!(
                out,
                "{}\t{}\t{}\t{}",
                qa.question, qa.answer, qa.gold_fact, qa.timestamp_ms
            )
            .expect("string write");
        }
        out
    }

    /// Write the dataset as its canonical file set:
    /// `entities.tsv`, `facts_seen.tsv`, `facts_unseen.tsv`, `qa_seen.tsv`,
    /// `qa_unseen.tsv`, and `qa_two_hop.tsv` when the mode is enabled.
    pub fn write_files(&self, dir: &Path) -> Result<(), DataError> {
        fs::create_dir_all(dir)?;
        let mut entities = String::new();
        for (name, desc) in &self.entities {
            writeln!(entities, "{name}\t{desc}").expect("string write");
        }
        fs::write(dir.join("entities.tsv"), entities)?;
        fs::write(
            dir.join("facts_seen.tsv"),
            self.facts_tsv(0..self.n_seen_facts),
        )?;
        fs::write(
            dir.join("facts_unseen.tsv"),
            self.facts_tsv(self.n_seen_facts..self.facts.len()),
        )?;
        fs::write(dir.join("qa_seen.tsv"), Self::qa_tsv(&self.qa_seen))?;
        fs::write(dir.join("qa_unseen.tsv"), Self::qa_tsv(&self.qa_unseen))?;
        if !self.qa_two_hop.is_empty() {
            fs::write(dir.join("qa_two_hop.tsv"), Self::qa_tsv(&self.qa_two_hop))?;
        }
        Ok(())
    }
}

/// Parse a QA file (question \t answer \t gold_fact_id \t timestamp_ms).
pub fn load_qa_file(path: &Path) -> Result<Vec<QaPair>, DataError> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parts: Vec<&str> = line.split('\t').collect();
        if parts.len() != 4 {
            return Err(DataError::Parse {
                line: lineno,
                msg: format!("expected 4 tab-separated fields, got {}", parts.len()),
            });
        }
        let gold_fact = parts[2].parse().map_err(|e| DataError::Parse {
            line: lineno,
            msg: format!("bad gold fact id: {e}"),
        })?;
        let timestamp_ms = parts[3].parse().map_err(|e| DataError::Parse {
            line: lineno,
            msg: format!("bad timestamp: {e}"),
        })?;
        out.push(QaPair {
            question: parts[0].to_string(),
            answer: parts[1].to_string(),
            gold_fact,
            timestamp_ms,
        });
    }
    Ok(out)
}
