//! Provider assembly: live HTTP bindings or offline mocks, optional
//! record/replay tape, and an embedding cache.

use std::collections::{BTreeMap, HashMap};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use personamem_core::mock::{EchoLastUtterance, HeuristicRefiner, MockEmbedder, MockNli, TableCommonsense};
use personamem_core::persona::RelationType;
use personamem_core::provider::{
    ChatProvider, ChatRequest, ChatResponse, CommonsenseProvider, EmbeddingProvider, NliDistribution, NliProvider,
    ProviderError,
};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::config::{hex, Config, MockConfig, TapeMode};
use crate::http::{ChatCommonsense, HttpChat, HttpEmbedder, HttpNli, RetryPolicy, UreqTransport};

pub type SharedChat = Arc<dyn ChatProvider + Send + Sync>;
pub type SharedNli = Arc<dyn NliProvider + Send + Sync>;
pub type SharedEmbedder = Arc<dyn EmbeddingProvider + Send + Sync>;
pub type SharedCommonsense = Arc<dyn CommonsenseProvider + Send + Sync>;

#[derive(Debug, Error)]
pub enum SetupError {
    #[error("cannot read {path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error("provider {0} is not configured")]
    Missing(&'static str),
    #[error(transparent)]
    Provider(#[from] ProviderError),
}

/// The providers one run uses, plus a description for the manifest.
#[derive(Clone)]
pub struct ProviderSet {
    pub refine: SharedChat,
    pub response: SharedChat,
    pub nli: SharedNli,
    pub embedder: SharedEmbedder,
    pub commonsense: SharedCommonsense,
    pub describe: BTreeMap<String, String>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct NliTableFile {
    #[serde(default)]
    default_delta: Option<f64>,
    #[serde(default)]
    pairs: Vec<NliPair>,
    #[serde(default)]
    directed: Vec<NliDirected>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct NliPair {
    a: String,
    b: String,
    delta: f64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct NliDirected {
    premise: String,
    hypothesis: String,
    delta: f64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CommonsenseFile {
    #[serde(default)]
    fallback: Option<String>,
    #[serde(default)]
    entries: Vec<CommonsenseEntry>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CommonsenseEntry {
    text: String,
    relation: RelationType,
    generations: Vec<String>,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, SetupError> {
    let text = std::fs::read_to_string(path).map_err(|source| SetupError::Read {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|e| SetupError::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Load a mock NLI table:
/// `{"default_delta": 0.05, "pairs": [{"a": .., "b": .., "delta": ..}], "directed": [...]}`.
pub fn load_mock_nli(path: Option<&Path>, default_delta: f64) -> Result<MockNli, SetupError> {
    let Some(path) = path else {
        return Ok(MockNli::new(default_delta));
    };
    let file: NliTableFile = read_json(path)?;
    let mut nli = MockNli::new(file.default_delta.unwrap_or(default_delta));
    for p in file.pairs {
        nli.insert(&p.a, &p.b, p.delta);
    }
    for d in file.directed {
        nli.insert_directed(&d.premise, &d.hypothesis, d.delta);
    }
    Ok(nli)
}

/// Load a mock commonsense table:
/// `{"fallback": "...{text}...{relation}...", "entries": [{"text", "relation", "generations"}]}`.
pub fn load_mock_commonsense(path: Option<&Path>, fallback: Option<String>) -> Result<TableCommonsense, SetupError> {
    let Some(path) = path else {
        return Ok(TableCommonsense::new(fallback));
    };
    let file: CommonsenseFile = read_json(path)?;
    let mut table = TableCommonsense::new(fallback.or(file.fallback));
    for e in file.entries {
        for g in &e.generations {
            table.insert(&e.text, e.relation, g);
        }
    }
    Ok(table)
}

pub fn mock_providers(m: &MockConfig) -> Result<ProviderSet, SetupError> {
    let nli = load_mock_nli(m.nli_table.as_deref(), m.default_delta)?;
    let cs = load_mock_commonsense(m.commonsense_table.as_deref(), m.commonsense_fallback.clone())?;
    let mut describe = BTreeMap::new();
    describe.insert(
        "refine".into(),
        format!("mock:heuristic-refiner seed={}", m.refine_seed),
    );
    describe.insert("response".into(), "mock:echo-last-utterance".into());
    describe.insert(
        "nli".into(),
        format!("mock:table entries={} default={}", nli.len(), m.default_delta),
    );
    describe.insert(
        "embedding".into(),
        format!("mock:hashed seed={} dim={}", m.embed_seed, m.embed_dim),
    );
    describe.insert("commonsense".into(), "mock:table".into());
    Ok(ProviderSet {
        refine: Arc::new(HeuristicRefiner { seed: m.refine_seed }),
        response: Arc::new(EchoLastUtterance),
        nli: Arc::new(nli),
        embedder: Arc::new(MockEmbedder::new(m.embed_seed, m.embed_dim)),
        commonsense: Arc::new(cs),
        describe,
    })
}

/// Live providers from the config, wrapped in the tape when enabled.
pub fn live_providers(config: &Config) -> Result<ProviderSet, SetupError> {
    let retry = RetryPolicy::from(&config.retry);
    let tape = match config.tape.mode {
        TapeMode::Off => None,
        mode => Some(Arc::new(Tape::open(
            config.tape.path.as_deref().expect("validated"),
            mode == TapeMode::Replay,
        )?)),
    };
    let replay = config.tape.mode == TapeMode::Replay;
    let p = &config.providers;
    let mut describe = BTreeMap::new();

    let (chat, cs_chat): (SharedChat, SharedChat) = match (&p.chat, replay) {
        (Some(cfg), false) => {
            let transport = Arc::new(UreqTransport::new(Duration::from_secs(cfg.timeout_secs)));
            let chat = HttpChat::new(cfg, retry, transport.clone())?;
            let mut cs_cfg = cfg.clone();
            if let Some(m) = &p.commonsense_model {
                cs_cfg.model = m.clone();
            }
            let cs = HttpChat::new(&cs_cfg, retry, transport)?;
            describe.insert(
                "chat".into(),
                format!("openai-compatible {} model={}", cfg.base_url, cfg.model),
            );
            (Arc::new(chat), Arc::new(cs))
        }
        (Some(cfg), true) => {
            describe.insert("chat".into(), format!("replay model={}", cfg.model));
            (Arc::new(Unavailable("chat")), Arc::new(Unavailable("chat")))
        }
        (None, _) => return Err(SetupError::Missing("chat")),
    };
    let nli: SharedNli = match (&p.nli, replay) {
        (Some(cfg), false) => {
            describe.insert("nli".into(), format!("http {}", cfg.url));
            let transport = Arc::new(UreqTransport::new(Duration::from_secs(cfg.timeout_secs)));
            Arc::new(HttpNli::new(cfg, retry, transport)?)
        }
        (Some(cfg), true) => {
            describe.insert("nli".into(), format!("replay {}", cfg.url));
            Arc::new(Unavailable("nli"))
        }
        (None, _) => return Err(SetupError::Missing("nli")),
    };
    let embedder: SharedEmbedder = match (&p.embedding, replay) {
        (Some(cfg), false) => {
            describe.insert(
                "embedding".into(),
                format!("openai-compatible {} model={}", cfg.base_url, cfg.model),
            );
            let transport = Arc::new(UreqTransport::new(Duration::from_secs(cfg.timeout_secs)));
            Arc::new(HttpEmbedder::new(cfg, retry, transport)?)
        }
        (Some(cfg), true) => {
            describe.insert("embedding".into(), format!("replay model={}", cfg.model));
            Arc::new(Unavailable("embedding"))
        }
        (None, _) => return Err(SetupError::Missing("embedding")),
    };
    let chat_model = p.chat.as_ref().map(|c| c.model.clone()).unwrap_or_default();
    let cs_model = p.commonsense_model.clone().unwrap_or_else(|| chat_model.clone());
    describe.insert("commonsense".into(), format!("chat model={cs_model}"));
    match tape {
        None => Ok(ProviderSet {
            refine: chat.clone(),
            response: chat,
            nli,
            embedder,
            commonsense: Arc::new(ChatCommonsense {
                llm: cs_chat,
                max_tokens: 48,
            }),
            describe,
        }),
        Some(tape) => {
            let chat: SharedChat = Arc::new(Taped::new(chat, tape.clone(), format!("chat:{chat_model}")));
            let cs_chat: SharedChat = Arc::new(Taped::new(cs_chat, tape.clone(), format!("chat:{cs_model}")));
            Ok(ProviderSet {
                refine: chat.clone(),
                response: chat,
                nli: Arc::new(Taped::new(nli, tape.clone(), "nli".into())),
                embedder: Arc::new(Taped::new(embedder, tape, "embedding".into())),
                commonsense: Arc::new(ChatCommonsense {
                    llm: cs_chat,
                    max_tokens: 48,
                }),
                describe,
            })
        }
    }
}

/// Stand-in used in replay mode: every call is a cache miss.
struct Unavailable(&'static str);

impl Unavailable {
    fn miss(&self) -> ProviderError {
        ProviderError::BadResponse(format!("no recorded {} response on tape", self.0))
    }
}

impl ChatProvider for Unavailable {
    fn complete(&self, _: &ChatRequest) -> Result<ChatResponse, ProviderError> {
        Err(self.miss())
    }
}

impl NliProvider for Unavailable {
    fn classify(&self, _: &str, _: &str) -> Result<NliDistribution, ProviderError> {
        Err(self.miss())
    }
}

impl EmbeddingProvider for Unavailable {
    fn embed(&self, _: &[&str]) -> Result<Vec<Vec<f64>>, ProviderError> {
        Err(self.miss())
    }
}

#[derive(Serialize, Deserialize)]
struct TapeLine {
    key: String,
    response: Value,
}

/// Request-hash keyed store of provider responses, appended as JSONL.
pub struct Tape {
    entries: Mutex<HashMap<String, Value>>,
    file: Mutex<Option<File>>,
}

impl Tape {
    /// Load an existing tape. Unless `read_only`, new entries are appended.
    pub fn open(path: &Path, read_only: bool) -> Result<Self, SetupError> {
        let mut entries = HashMap::new();
        let read_err = |source| SetupError::Read {
            path: path.to_path_buf(),
            source,
        };
        if path.exists() {
            let reader = BufReader::new(File::open(path).map_err(read_err)?);
            for (i, line) in reader.lines().enumerate() {
                let line = line.map_err(read_err)?;
                if line.trim().is_empty() {
                    continue;
                }
                let t: TapeLine = serde_json::from_str(&line).map_err(|e| SetupError::Format {
                    path: path.to_path_buf(),
                    message: format!("line {}: {e}", i + 1),
                })?;
                entries.insert(t.key, t.response);
            }
        } else if read_only {
            return Err(read_err(std::io::Error::new(
                std::io::ErrorKind::NotFound,
                "tape not found",
            )));
        }
        let file = if read_only {
            None
        } else {
            Some(
                OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(path)
                    .map_err(read_err)?,
            )
        };
        Ok(Tape {
            entries: Mutex::new(entries),
            file: Mutex::new(file),
        })
    }

    pub fn key(namespace: &str, request: &Value) -> String {
        let mut h = Sha256::new();
        h.update(namespace.as_bytes());
        h.update([0]);
        h.update(request.to_string().as_bytes());
        hex(&h.finalize())
    }

    pub fn get(&self, key: &str) -> Option<Value> {
        self.entries.lock().expect("tape lock").get(key).cloned()
    }

    pub fn put(&self, key: String, response: Value) -> Result<(), ProviderError> {
        let mut file = self.file.lock().expect("tape lock");
        if let Some(f) = file.as_mut() {
            let line = serde_json::to_string(&TapeLine {
                key: key.clone(),
                response: response.clone(),
            })
            .expect("tape line serializes");
            writeln!(f, "{line}").map_err(|e| ProviderError::Transport(format!("tape write: {e}")))?;
        }
        self.entries.lock().expect("tape lock").insert(key, response);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.lock().expect("tape lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Serves recorded responses and records new ones.
pub struct Taped<P> {
    inner: P,
    tape: Arc<Tape>,
    namespace: String,
}

impl<P> Taped<P> {
    pub fn new(inner: P, tape: Arc<Tape>, namespace: String) -> Self {
        Taped { inner, tape, namespace }
    }

    fn decode<T: serde::de::DeserializeOwned>(v: Value) -> Result<T, ProviderError> {
        serde_json::from_value(v).map_err(|e| ProviderError::BadResponse(format!("tape entry: {e}")))
    }
}

impl<P: ChatProvider> ChatProvider for Taped<P> {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, ProviderError> {
        let key = Tape::key(
            &self.namespace,
            &serde_json::to_value(request).expect("request serializes"),
        );
        if let Some(v) = self.tape.get(&key) {
            return Self::decode(v);
        }
        let out = self.inner.complete(request)?;
        self.tape
            .put(key, serde_json::to_value(&out).expect("response serializes"))?;
        Ok(out)
    }
}

#[derive(Serialize, Deserialize)]
struct Dist {
    entail: f64,
    neutral: f64,
    contradiction: f64,
}

impl<P: NliProvider> NliProvider for Taped<P> {
    fn classify(&self, premise: &str, hypothesis: &str) -> Result<NliDistribution, ProviderError> {
        let mut out = self.classify_batch(&[(premise, hypothesis)])?;
        Ok(out.remove(0))
    }

    /// Looks up each pair separately and sends only the misses upstream.
    fn classify_batch(&self, pairs: &[(&str, &str)]) -> Result<Vec<NliDistribution>, ProviderError> {
        let keys: Vec<String> = pairs
            .iter()
            .map(|(p, h)| Tape::key(&self.namespace, &serde_json::json!([p, h])))
            .collect();
        let mut out: Vec<Option<NliDistribution>> = Vec::with_capacity(pairs.len());
        for k in &keys {
            out.push(match self.tape.get(k) {
                Some(v) => {
                    let d: Dist = Self::decode(v)?;
                    Some(NliDistribution {
                        entail: d.entail,
                        neutral: d.neutral,
                        contradiction: d.contradiction,
                    })
                }
                None => None,
            });
        }
        let missing: Vec<usize> = (0..pairs.len()).filter(|i| out[*i].is_none()).collect();
        if !missing.is_empty() {
            let request: Vec<(&str, &str)> = missing.iter().map(|i| pairs[*i]).collect();
            let fresh = self.inner.classify_batch(&request)?;
            if fresh.len() != missing.len() {
                return Err(ProviderError::BadResponse(
                    "NLI result count does not match request".into(),
                ));
            }
            for (i, d) in missing.into_iter().zip(fresh) {
                let v = serde_json::to_value(Dist {
                    entail: d.entail,
                    neutral: d.neutral,
                    contradiction: d.contradiction,
                })
                .expect("distribution serializes");
                self.tape.put(keys[i].clone(), v)?;
                out[i] = Some(d);
            }
        }
        Ok(out.into_iter().map(|d| d.expect("filled")).collect())
    }
}

impl<P: EmbeddingProvider> EmbeddingProvider for Taped<P> {
    fn embed(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>, ProviderError> {
        let keys: Vec<String> = texts
            .iter()
            .map(|t| Tape::key(&self.namespace, &Value::from(*t)))
            .collect();
        let mut out: Vec<Option<Vec<f64>>> = Vec::with_capacity(texts.len());
        for k in &keys {
            out.push(self.tape.get(k).map(Self::decode).transpose()?);
        }
        let missing: Vec<usize> = (0..texts.len()).filter(|i| out[*i].is_none()).collect();
        if !missing.is_empty() {
            let request: Vec<&str> = missing.iter().map(|i| texts[*i]).collect();
            let fresh = self.inner.embed(&request)?;
            if fresh.len() != missing.len() {
                return Err(ProviderError::BadResponse(
                    "embedding count does not match request".into(),
                ));
            }
            for (i, v) in missing.into_iter().zip(fresh) {
                self.tape
                    .put(keys[i].clone(), serde_json::to_value(&v).expect("vector serializes"))?;
                out[i] = Some(v);
            }
        }
        Ok(out.into_iter().map(|v| v.expect("filled")).collect())
    }
}

/// Embedding cache keyed by text; only misses reach the inner provider.
pub struct EmbedCache<E> {
    inner: E,
    cache: Mutex<HashMap<String, Vec<f64>>>,
}

impl<E> EmbedCache<E> {
    pub fn new(inner: E) -> Self {
        EmbedCache {
            inner,
            cache: Mutex::new(HashMap::new()),
        }
    }

    pub fn inner(&self) -> &E {
        &self.inner
    }
}

impl<E: EmbeddingProvider> EmbeddingProvider for EmbedCache<E> {
    fn embed(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>, ProviderError> {
        let mut missing: Vec<&str> = {
            let cache = self.cache.lock().expect("cache lock");
            texts.iter().copied().filter(|t| !cache.contains_key(*t)).collect()
        };
        missing.sort_unstable();
        missing.dedup();
        if !missing.is_empty() {
            let fresh = self.inner.embed(&missing)?;
            if fresh.len() != missing.len() {
                return Err(ProviderError::BadResponse(
                    "embedding count does not match request".into(),
                ));
            }
            let mut cache = self.cache.lock().expect("cache lock");
            for (t, v) in missing.into_iter().zip(fresh) {
                cache.insert(t.to_string(), v);
            }
        }
        let cache = self.cache.lock().expect("cache lock");
        Ok(texts.iter().map(|t| cache[*t].clone()).collect())
    }
}
