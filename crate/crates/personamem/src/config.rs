//! TOML run configuration.
//!
//! Relative paths are resolved against the directory holding the config
//! file. Secrets are never read from the file: providers name the
//! environment variable that carries their key.

use std::path::{Path, PathBuf};

use personamem_core::contradiction::ThresholdMode;
use personamem_core::metrics::{BleuAggregation, PriceTable};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid config: {0}")]
    Parse(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BleuMode {
    #[default]
    Sentence,
    Corpus,
}

impl From<BleuMode> for BleuAggregation {
    fn from(m: BleuMode) -> Self {
        match m {
            BleuMode::Sentence => BleuAggregation::SentenceAverage,
            BleuMode::Corpus => BleuAggregation::Corpus,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub corpus: PathBuf,
    pub out_dir: PathBuf,
    /// First and last session evaluated by response generation.
    pub eval_sessions: (u32, u32),
    pub k: usize,
    pub mu: f64,
    pub strict_threshold: bool,
    pub filter_threshold: f64,
    pub restore_isolated: bool,
    /// Leave out pairs an earlier refinement judged compatible.
    pub skip_preserved_pairs: bool,
    pub bleu: BleuMode,
    /// Exit with a distinct code when degenerate metric inputs exceed this share.
    pub max_degenerate_ratio: f64,
    pub workers: usize,
    pub nli_batch_size: usize,
    pub refine_retries: u32,
    pub refine_max_tokens: u32,
    pub response_max_tokens: u32,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            corpus: PathBuf::from("corpus.jsonl"),
            out_dir: PathBuf::from("runs"),
            eval_sessions: (2, 5),
            k: 20,
            mu: personamem_core::DEFAULT_MU,
            strict_threshold: false,
            filter_threshold: personamem_core::expansion::INITIAL_FILTER_THRESHOLD,
            restore_isolated: false,
            skip_preserved_pairs: true,
            bleu: BleuMode::Sentence,
            max_degenerate_ratio: 0.05,
            workers: 4,
            nli_batch_size: 32,
            refine_retries: 2,
            refine_max_tokens: 512,
            response_max_tokens: 160,
        }
    }
}

impl RunConfig {
    pub fn threshold_mode(&self) -> ThresholdMode {
        if self.strict_threshold {
            ThresholdMode::Strict
        } else {
            ThresholdMode::Inclusive
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Templates {
    pub refine: Option<PathBuf>,
    pub response: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChatEndpoint {
    /// Base URL of an OpenAI-compatible API, e.g. `https://api.openai.com/v1`.
    pub base_url: String,
    pub model: String,
    pub api_key_env: Option<String>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NliEndpoint {
    /// Full URL accepting `{"pairs":[{"premise","hypothesis"}]}`.
    pub url: String,
    pub api_key_env: Option<String>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbeddingEndpoint {
    pub base_url: String,
    pub model: String,
    pub api_key_env: Option<String>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
}

fn default_timeout() -> u64 {
    60
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProviderConfig {
    pub chat: Option<ChatEndpoint>,
    pub nli: Option<NliEndpoint>,
    pub embedding: Option<EmbeddingEndpoint>,
    /// Commonsense expansion reuses the chat endpoint; this overrides its model.
    pub commonsense_model: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RetryConfig {
    pub max_retries: u32,
    pub base_delay_ms: u64,
    pub max_delay_ms: u64,
}

impl Default for RetryConfig {
    fn default() -> Self {
        RetryConfig {
            max_retries: 4,
            base_delay_ms: 500,
            max_delay_ms: 16_000,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TapeMode {
    #[default]
    Off,
    Record,
    Replay,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TapeConfig {
    pub mode: TapeMode,
    pub path: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Prices {
    pub chat: PriceTable,
    pub embedding: PriceTable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MockConfig {
    /// JSON table of contradiction scores, see `providers::load_mock_nli`.
    pub nli_table: Option<PathBuf>,
    pub default_delta: f64,
    /// JSON table of commonsense generations.
    pub commonsense_table: Option<PathBuf>,
    /// Template for unlisted commonsense requests (`{text}`, `{relation}`).
    pub commonsense_fallback: Option<String>,
    pub embed_seed: u64,
    pub embed_dim: usize,
    pub refine_seed: u64,
}

impl Default for MockConfig {
    fn default() -> Self {
        MockConfig {
            nli_table: None,
            default_delta: 0.05,
            commonsense_table: None,
            commonsense_fallback: None,
            embed_seed: 7,
            embed_dim: 64,
            refine_seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub run: RunConfig,
    pub templates: Templates,
    pub providers: ProviderConfig,
    pub retry: RetryConfig,
    pub tape: TapeConfig,
    pub prices: Prices,
    pub mock: MockConfig,
}

impl Config {
    pub fn parse(text: &str, base: &Path) -> Result<Self, ConfigError> {
        let mut c: Config = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        c.resolve_paths(base);
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        Config::parse(&text, base)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.run.corpus);
        fix(&mut self.run.out_dir);
        for p in [
            &mut self.templates.refine,
            &mut self.templates.response,
            &mut self.tape.path,
            &mut self.mock.nli_table,
            &mut self.mock.commonsense_table,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let r = &self.run;
        let bad = |m: &str| Err(ConfigError::Invalid(m.to_string()));
        if r.k == 0 {
            return bad("run.k must be at least 1");
        }
        if !(0.0..=1.0).contains(&r.mu) || !(0.0..=1.0).contains(&r.filter_threshold) {
            return bad("thresholds must lie in [0, 1]");
        }
        let (lo, hi) = r.eval_sessions;
        if lo == 0 || lo > hi {
            return bad("run.eval_sessions must be an increasing range starting at 1 or later");
        }
        if r.workers == 0 || r.nli_batch_size == 0 {
            return bad("run.workers and run.nli_batch_size must be positive");
        }
        if self.tape.mode != TapeMode::Off && self.tape.path.is_none() {
            return bad("tape.path is required when tape.mode is record or replay");
        }
        Ok(())
    }

    /// SHA-256 over the canonical JSON form of the resolved config.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex(&Sha256::digest(json))
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_paths() {
        let c = Config::parse("[run]\ncorpus = \"data/c.jsonl\"\nk = 12\n", Path::new("/cfg")).unwrap();
        assert_eq!(c.run.corpus, PathBuf::from("/cfg/data/c.jsonl"));
        assert_eq!(c.run.k, 12);
        assert_eq!(c.run.mu, 0.8);
        assert_eq!(c.run.refine_retries, 2);
        assert_eq!(c.run.eval_sessions, (2, 5));
        assert_eq!(c.hash().len(), 64);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        assert!(matches!(
            Config::parse("[run]\nkk = 1\n", Path::new(".")),
            Err(ConfigError::Parse(_))
        ));
        assert!(matches!(
            Config::parse("[run]\nk = 0\n", Path::new(".")),
            Err(ConfigError::Invalid(_))
        ));
        assert!(matches!(
            Config::parse("[tape]\nmode = \"replay\"\n", Path::new(".")),
            Err(ConfigError::Invalid(_))
        ));
    }

    #[test]
    fn hash_tracks_content() {
        let a = Config::default();
        let mut b = Config::default();
        b.run.k = 30;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash(), Config::default().hash());
    }
}
