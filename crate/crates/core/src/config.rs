//! Flat key = value configuration covering every tunable default of the
//! engine: retrieval widths, attention sparsity, model shape, embedding
//! training, the service port, and benchmark knobs.
//!
//! Unknown keys are errors (typos should not silently fall back to
//! defaults), `#` starts a comment, and blank lines are ignored.

use std::fs;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

/// Every runtime default in one place. Field names double as config keys.
#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    /// Top-k facts kept by sparse knowledge attention.
    pub k: usize,
    /// Coarse retrieval width: number of ANN seed entities.
    pub coarse_n: usize,
    /// Auxiliary-loss weight.
    pub alpha: f64,
    /// Complex dimensions per graph embedding row.
    pub d_k: usize,
    /// Hashed text-embedding dimension.
    pub d_h: usize,
    /// Decoder width.
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ffn: usize,
    pub max_seq_len: usize,
    /// Comma-separated layer indices receiving knowledge fusion.
    pub fusion_layers: Vec<usize>,
    /// Knowledge-attention projection width and head count.
    pub attn_d_proj: usize,
    pub attn_n_heads: usize,
    /// Candidate subgraph cap M and expansion depth.
    pub max_candidates: usize,
    pub subgraph_hops: usize,
    /// Background embedding retraining every this many committed updates
    /// (0 disables).
    pub retrain_cadence: u64,
    /// Embedding trainer.
    pub embed_margin: f64,
    pub embed_lr: f64,
    pub embed_steps: usize,
    pub embed_negatives: usize,
    pub embed_adv_temperature: f64,
    /// ANN index shape.
    pub ann_max_links: usize,
    pub ann_ef_construction: usize,
    pub ann_ef_search: usize,
    pub ann_exact: bool,
    /// Decoder training.
    pub train_lr: f64,
    pub train_epochs: usize,
    pub train_batch_size: usize,
    /// Knowledge-read drills mixed into each training epoch, as a fraction
    /// of the question count. A drill re-points the phrasing of a real
    /// training question at a fact sampled fresh from the whole table, so
    /// unlike the fixed question set it cannot be memorized — selection
    /// and the read-off through the fusion pathway stay under training
    /// pressure for the entire run (0 disables).
    pub train_read_drills: f64,
    /// Generation cap per query.
    pub max_new_tokens: usize,
    /// Service port.
    pub port: u16,
    pub seed: u64,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            k: 5,
            coarse_n: 200,
            alpha: 0.3,
            d_k: 200,
            d_h: 256,
            d_model: 128,
            n_layers: 4,
            n_heads: 4,
            d_ffn: 512,
            max_seq_len: 256,
            fusion_layers: vec![3],
            attn_d_proj: 64,
            attn_n_heads: 4,
            max_candidates: 4096,
            subgraph_hops: 1,
            retrain_cadence: 1000,
            embed_margin: 9.0,
            embed_lr: 0.05,
            embed_steps: 100,
            embed_negatives: 16,
            embed_adv_temperature: 1.0,
            ann_max_links: 24,
            ann_ef_construction: 200,
            ann_ef_search: 400,
            ann_exact: false,
            train_lr: 1e-3,
            train_epochs: 10,
            train_batch_size: 32,
            train_read_drills: 0.5,
            max_new_tokens: 8,
            port: 4871,
            seed: 42,
        }
    }
}

impl Config {
    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        Self::from_str_checked(&fs::read_to_string(path)?)
    }

    pub fn from_str_checked(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Config::default();
        for (i, raw) in text.lines().enumerate() {
            let lineno = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| ConfigError::Parse {
                line: lineno,
                msg: "expected `key = value`".into(),
            })?;
            cfg.set(key.trim(), value.trim(), lineno)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, key: &str, value: &str, line: usize) -> Result<(), ConfigError> {
        fn parse<T: std::str::FromStr>(v: &str, line: usize) -> Result<T, ConfigError>
        where
            T::Err: std::fmt::Display,
        {
            v.parse().map_err(|e| ConfigError::Parse {
                line,
                msg: format!("bad value `{v}`: {e}"),
            })
        }
        match key {
            "k" => self.k = parse(value, line)?,
            "coarse_n" => self.coarse_n = parse(value, line)?,
            "alpha" => self.alpha = parse(value, line)?,
            "d_k" => self.d_k = parse(value, line)?,
            "d_h" => self.d_h = parse(value, line)?,
            "d_model" => self.d_model = parse(value, line)?,
            "n_layers" => self.n_layers = parse(value, line)?,
            "n_heads" => self.n_heads = parse(value, line)?,
            "d_ffn" => self.d_ffn = parse(value, line)?,
            "max_seq_len" => self.max_seq_len = parse(value, line)?,
            "fusion_layers" => {
                self.fusion_layers = value
                    .split(',')
                    .map(|p| parse(p.trim(), line))
                    .collect::<Result<Vec<usize>, _>>()?;
            }
            "attn_d_proj" => self.attn_d_proj = parse(value, line)?,
            "attn_n_heads" => self.attn_n_heads = parse(value, line)?,
            "max_candidates" => self.max_candidates = parse(value, line)?,
            "subgraph_hops" => self.subgraph_hops = parse(value, line)?,
            "retrain_cadence" => self.retrain_cadence = parse(value, line)?,
            "embed_margin" => self.embed_margin = parse(value, line)?,
            "embed_lr" => self.embed_lr = parse(value, line)?,
            "embed_steps" => self.embed_steps = parse(value, line)?,
            "embed_negatives" => self.embed_negatives = parse(value, line)?,
            "embed_adv_temperature" => self.embed_adv_temperature = parse(value, line)?,
            "ann_max_links" => self.ann_max_links = parse(value, line)?,
            "ann_ef_construction" => self.ann_ef_construction = parse(value, line)?,
            "ann_ef_search" => self.ann_ef_search = parse(value, line)?,
            "ann_exact" => self.ann_exact = parse(value, line)?,
            "train_lr" => self.train_lr = parse(value, line)?,
            "train_epochs" => self.train_epochs = parse(value, line)?,
            "train_batch_size" => self.train_batch_size = parse(value, line)?,
            "train_read_drills" => self.train_read_drills = parse(value, line)?,
            "max_new_tokens" => self.max_new_tokens = parse(value, line)?,
            "port" => self.port = parse(value, line)?,
            "seed" => self.seed = parse(value, line)?,
            _ => {
                return Err(ConfigError::UnknownKey {
                    line,
                    key: key.to_string(),
                })
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.k == 0 || self.coarse_n == 0 || self.max_candidates == 0 {
            return Err(ConfigError::Invalid(
                "k, coarse_n, and max_candidates must be positive".into(),
            ));
        }
        if self.alpha < 0.0 || !self.alpha.is_finite() {
            return Err(ConfigError::Invalid("alpha must be finite and ≥ 0".into()));
        }
        if self.subgraph_hops == 0 {
            return Err(ConfigError::Invalid("subgraph_hops must be ≥ 1".into()));
        }
        if self.d_k == 0 || self.d_h == 0 {
            return Err(ConfigError::Invalid("d_k and d_h must be positive".into()));
        }
        if self.train_read_drills < 0.0 || !self.train_read_drills.is_finite() {
            return Err(ConfigError::Invalid(
                "train_read_drills must be finite and ≥ 0".into(),
            ));
        }
        Ok(())
    }

    /// Render as a parseable config file (every key, current values).
    pub fn to_file_string(&self) -> String {
        let fusion = self
            .fusion_layers
            .iter()
            .map(|l| l.to_string())
            .collect::<Vec<_>>()
            .join(",");
        format!(
            "k = {}\ncoarse_n = {}\nalpha = {}\nd_k = {}\nd_h = {}\nd_model = {}\n\
             n_layers = {}\nn_heads = {}\nd_ffn = {}\nmax_seq_len = {}\nfusion_layers = {}\n\
             attn_d_proj = {}\nattn_n_heads = {}\nmax_candidates = {}\nsubgraph_hops = {}\n\
             retrain_cadence = {}\nembed_margin = {}\nembed_lr = {}\nembed_steps = {}\n\
             embed_negatives = {}\nembed_adv_temperature = {}\nann_max_links = {}\n\
             ann_ef_construction = {}\nann_ef_search = {}\nann_exact = {}\ntrain_lr = {}\n\
             train_epochs = {}\ntrain_batch_size = {}\ntrain_read_drills = {}\n\
             max_new_tokens = {}\nport = {}\nseed = {}\n",
            self.k,
            self.coarse_n,
            self.alpha,
            self.d_k,
            self.d_h,
            self.d_model,
            self.n_layers,
            self.n_heads,
            self.d_ffn,
            self.max_seq_len,
            fusion,
            self.attn_d_proj,
            self.attn_n_heads,
            self.max_candidates,
            self.subgraph_hops,
            self.retrain_cadence,
            self.embed_margin,
            self.embed_lr,
            self.embed_steps,
            self.embed_negatives,
            self.embed_adv_temperature,
            self.ann_max_links,
            self.ann_ef_construction,
            self.ann_ef_search,
            self.ann_exact,
            self.train_lr,
            self.train_epochs,
            self.train_batch_size,
            self.train_read_drills,
            self.max_new_tokens,
            self.port,
            self.seed,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_the_documented_values() {
        let c = Config::default();
        assert_eq!(c.k, 5);
        assert_eq!(c.coarse_n, 200);
        assert_eq!(c.alpha, 0.3);
        assert_eq!(c.d_k, 200);
        assert_eq!(c.d_h, 256);
        assert_eq!(c.d_model, 128);
        assert_eq!(c.fusion_layers, vec![3]);
        assert_eq!(c.max_candidates, 4096);
        assert_eq!(c.retrain_cadence, 1000);
    }

    #[test]
    fn parses_overrides_comments_and_blank_lines() {
        let text = "# tuning\nk = 7\n\nalpha=0.5  # inline comment\nfusion_layers = 1, 3\nann_exact = true\n";
        let c = Config::from_str_checked(text).unwrap();
        assert_eq!(c.k, 7);
        assert_eq!(c.alpha, 0.5);
        assert_eq!(c.fusion_layers, vec![1, 3]);
        assert!(c.ann_exact);
        assert_eq!(c.coarse_n, 200, "untouched keys keep defaults");
    }

    #[test]
    fn unknown_keys_are_rejected_with_line_numbers() {
        match Config::from_str_checked("k = 5\nkk = 9\n") {
            Err(ConfigError::UnknownKey { line, key }) => {
                assert_eq!(line, 2);
                assert_eq!(key, "kk");
            }
            other => panic!("expected UnknownKey, got {other:?}"),
        }
        assert!(Config::from_str_checked("just words\n").is_err());
        assert!(Config::from_str_checked("k = zebra\n").is_err());
        assert!(Config::from_str_checked("k = 0\n").is_err());
    }

    #[test]
    fn renders_and_reparses_losslessly() {
        let mut c = Config::default();
        c.k = 9;
        c.fusion_layers = vec![0, 2];
        c.alpha = 0.15;
        let text = c.to_file_string();
        let back = Config::from_str_checked(&text).unwrap();
        assert_eq!(back, c);
    }
}
