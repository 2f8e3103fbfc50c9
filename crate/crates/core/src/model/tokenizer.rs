//! Whitespace tokenizer over the synthetic vocabulary.
//!
//! Four reserved symbols occupy the lowest ids, then corpus tokens in
//! sorted order — building the vocabulary twice from the same corpus yields
//! byte-identical tables, which checkpoint determinism depends on.

use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::path::Path;

pub const PAD: u32 = 0;
pub const EOS: u32 = 1;
pub const UNK: u32 = 2;
/// Separates the question from the answer in every training line; also the
/// generation prompt terminator.
pub const ANSWER_SEP: u32 = 3;

pub const PAD_TOKEN: &str = "<pad>";
pub const EOS_TOKEN: &str = "<eos>";
pub const UNK_TOKEN: &str = "<unk>";
pub const ANSWER_SEP_TOKEN: &str = "<a>";

const RESERVED: [&str; 4] = [PAD_TOKEN, EOS_TOKEN, UNK_TOKEN, ANSWER_SEP_TOKEN];

#[derive(Debug, Clone)]
pub struct Tokenizer {
    token_to_id: HashMap<String, u32>,
    id_to_token: Vec<String>,
}

impl Tokenizer {
    /// Build from raw text lines: every whitespace-separated token that is
    /// not a reserved symbol enters the vocabulary, deduplicated and sorted.
    pub fn from_corpus<'a>(lines: impl IntoIterator<Item = &'a str>) -> Self {
        let mut words: Vec<&str> = lines
            .into_iter()
            .flat_map(|l| l.split_whitespace())
            .filter(|w| !RESERVED.contains(w))
            .collect();
        words.sort_unstable();
        words.dedup();

        let mut id_to_token: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        id_to_token.extend(words.into_iter().map(str::to_string));
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Tokenizer {
            token_to_id,
            id_to_token,
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.id_to_token.len()
    }

    /// Encode whitespace-separated text; unknown words map to `<unk>`.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        text.split_whitespace()
            .map(|w| self.token_to_id.get(w).copied().unwrap_or(UNK))
            .collect()
    }

    /// Decode ids to space-joined tokens, stopping before `<eos>` and
    /// skipping padding.
    pub fn decode(&self, ids: &[u32]) -> String {
        let mut parts = Vec::new();
        for &id in ids {
            if id == EOS {
                break;
            }
            if id == PAD {
                continue;
            }
            parts.push(self.id_to_token[id as usize].as_str());
        }
        parts.join(" ")
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.id_to_token.get(id as usize).map(String::as_str)
    }

    pub fn id_of(&self, token: &str) -> Option<u32> {
        self.token_to_id.get(token).copied()
    }

    /// One token per line, in id order.
    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        for t in &self.id_to_token {
            writeln!(f, "{t}")?;
        }
        f.flush()
    }

    pub fn load(path: &Path) -> std::io::Result<Self> {
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        let id_to_token: Vec<String> = f.lines().collect::<Result<_, _>>()?;
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Ok(Tokenizer {
            token_to_id,
            id_to_token,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reserved_ids_come_first_and_corpus_is_sorted() {
        let tok = Tokenizer::from_corpus(["what is the capital", "the capital is berlin"]);
        assert_eq!(tok.id_of(PAD_TOKEN), Some(PAD));
        assert_eq!(tok.id_of(EOS_TOKEN), Some(EOS));
        assert_eq!(tok.id_of(UNK_TOKEN), Some(UNK));
        assert_eq!(tok.id_of(ANSWER_SEP_TOKEN), Some(ANSWER_SEP));
        // berlin < capital < is < the < what
        assert_eq!(tok.id_of("berlin"), Some(4));
        assert_eq!(tok.id_of("what"), Some(8));
        assert_eq!(tok.vocab_size(), 9);
    }

    #[test]
    fn encode_decode_round_trip_with_unknowns() {
        let tok = Tokenizer::from_corpus(["alpha beta gamma"]);
        let ids = tok.encode("beta zeta alpha");
        assert_eq!(ids[1], UNK);
        assert_eq!(tok.decode(&ids), "beta <unk> alpha");
    }

    #[test]
    fn decode_stops_at_eos_and_skips_pad() {
        let tok = Tokenizer::from_corpus(["x y"]);
        let x = tok.id_of("x").unwrap();
        let y = tok.id_of("y").unwrap();
        assert_eq!(tok.decode(&[PAD, x, y, EOS, x]), "x y");
    }

    #[test]
    fn vocab_round_trips_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        let tok = Tokenizer::from_corpus(["some words here", "and more words"]);
        tok.save(&path).unwrap();
        let loaded = Tokenizer::load(&path).unwrap();
        assert_eq!(tok.vocab_size(), loaded.vocab_size());
        for id in 0..tok.vocab_size() as u32 {
            assert_eq!(tok.token(id), loaded.token(id));
        }
    }
}
