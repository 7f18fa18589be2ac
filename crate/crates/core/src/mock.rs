//! Deterministic in-process providers for tests and offline runs.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::hash::Hasher;
use core::sync::atomic::{AtomicUsize, Ordering};

use fnv::FnvHasher;

use crate::metrics::tokenize;
use crate::persona::RelationType;
use crate::provider::{
    ChatProvider, ChatRequest, ChatResponse, CommonsenseProvider, EmbeddingProvider, NliDistribution, NliProvider,
    ProviderError,
};

fn unordered(a: &str, b: &str) -> (String, String) {
    if a <= b {
        (a.to_string(), b.to_string())
    } else {
        (b.to_string(), a.to_string())
    }
}

/// Lookup-table NLI scorer.
///
/// Contradiction mass comes from the table (unordered pairs, with optional
/// directed overrides) or the default; the remainder is split evenly between
/// entailment and neutral. Identical texts always score 0.
#[derive(Debug, Clone, Default)]
pub struct MockNli {
    table: BTreeMap<(String, String), f64>,
    directed: BTreeMap<(String, String), f64>,
    default_delta: f64,
}

impl MockNli {
    pub fn new(default_delta: f64) -> Self {
        MockNli {
            table: BTreeMap::new(),
            directed: BTreeMap::new(),
            default_delta,
        }
    }

    pub fn insert(&mut self, a: &str, b: &str, delta: f64) -> &mut Self {
        self.table.insert(unordered(a, b), delta);
        self
    }

    pub fn insert_directed(&mut self, premise: &str, hypothesis: &str, delta: f64) -> &mut Self {
        self.directed
            .insert((premise.to_string(), hypothesis.to_string()), delta);
        self
    }

    pub fn delta(&self, premise: &str, hypothesis: &str) -> f64 {
        if premise == hypothesis {
            return 0.0;
        }
        self.directed
            .get(&(premise.to_string(), hypothesis.to_string()))
            .or_else(|| self.table.get(&unordered(premise, hypothesis)))
            .copied()
            .unwrap_or(self.default_delta)
    }

    pub fn len(&self) -> usize {
        self.table.len() + self.directed.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl NliProvider for MockNli {
    fn classify(&self, premise: &str, hypothesis: &str) -> Result<NliDistribution, ProviderError> {
        let delta = self.delta(premise, hypothesis);
        let rest = (1.0 - delta) / 2.0;
        Ok(NliDistribution {
            entail: rest,
            neutral: rest,
            contradiction: delta,
        })
    }
}

fn fnv64(seed: u64, parts: &[&[u8]]) -> u64 {
    let mut h = FnvHasher::with_key(0xcbf2_9ce4_8422_2325 ^ seed);
    for p in parts {
        h.write(p);
        h.write_u8(0xff);
    }
    h.finish()
}

fn unit_interval(h: u64) -> f64 {
    // 53 high bits -> [0, 1), then map to [-1, 1)
    (h >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
}

/// Seeded hashed bag-of-words embedder producing L2-normalized vectors.
#[derive(Debug, Clone, Copy)]
pub struct MockEmbedder {
    pub seed: u64,
    pub dim: usize,
}

impl Default for MockEmbedder {
    fn default() -> Self {
        MockEmbedder { seed: 0, dim: 64 }
    }
}

impl MockEmbedder {
    pub fn new(seed: u64, dim: usize) -> Self {
        MockEmbedder { seed, dim }
    }

    pub fn vector(&self, text: &str) -> Vec<f64> {
        let mut v = alloc::vec![0.0; self.dim];
        let tokens = tokenize(text);
        let mut add = |key: &str| {
            for (i, x) in v.iter_mut().enumerate() {
                *x += unit_interval(fnv64(self.seed, &[key.as_bytes(), &(i as u64).to_le_bytes()]));
            }
        };
        if tokens.is_empty() {
            add(text);
        } else {
            for t in &tokens {
                add(t);
            }
        }
        let norm = libm::sqrt(v.iter().map(|x| x * x).sum::<f64>());
        if norm > 0.0 {
            v.iter_mut().for_each(|x| *x /= norm);
        }
        v
    }
}

impl EmbeddingProvider for MockEmbedder {
    fn embed(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>, ProviderError> {
        Ok(texts.iter().map(|t| self.vector(t)).collect())
    }
}

/// Returns `"{text}|{relation}"` for every relation.
#[derive(Debug, Clone, Copy, Default)]
pub struct EchoCommonsense;

impl CommonsenseProvider for EchoCommonsense {
    fn generate(&self, persona_text: &str, relation: RelationType) -> Result<Vec<String>, ProviderError> {
        Ok(alloc::vec![format!("{persona_text}|{relation}")])
    }
}

/// Table-driven commonsense generator with an optional templated fallback.
#[derive(Debug, Clone, Default)]
pub struct TableCommonsense {
    table: BTreeMap<(String, RelationType), Vec<String>>,
    /// Fallback template with `{text}` and `{relation}` placeholders; `None`
    /// yields an empty generation for unlisted entries.
    pub fallback: Option<String>,
}

impl TableCommonsense {
    pub fn new(fallback: Option<String>) -> Self {
        TableCommonsense {
            table: BTreeMap::new(),
            fallback,
        }
    }

    pub fn insert(&mut self, text: &str, relation: RelationType, generation: &str) -> &mut Self {
        self.table
            .entry((text.to_string(), relation))
            .or_default()
            .push(generation.to_string());
        self
    }
}

impl CommonsenseProvider for TableCommonsense {
    fn generate(&self, persona_text: &str, relation: RelationType) -> Result<Vec<String>, ProviderError> {
        if let Some(g) = self.table.get(&(persona_text.to_string(), relation)) {
            return Ok(g.clone());
        }
        Ok(match &self.fallback {
            Some(tpl) => {
                let stem = persona_text.trim().trim_end_matches(['.', '!', '?']);
                alloc::vec![tpl.replace("{text}", stem).replace("{relation}", relation.as_str())]
            }
            None => Vec::new(),
        })
    }
}

/// Replays a fixed list of outcomes; the last one repeats once exhausted.
#[derive(Debug, Default)]
pub struct ScriptedChat {
    script: Vec<Result<String, ProviderError>>,
    cursor: AtomicUsize,
}

impl ScriptedChat {
    pub fn new(script: Vec<Result<String, ProviderError>>) -> Self {
        assert!(!script.is_empty(), "script must not be empty");
        ScriptedChat {
            script,
            cursor: AtomicUsize::new(0),
        }
    }

    pub fn replies<I, S>(replies: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        ScriptedChat::new(replies.into_iter().map(|s| Ok(s.into())).collect())
    }

    pub fn calls(&self) -> usize {
        self.cursor.load(Ordering::Relaxed)
    }
}

impl ChatProvider for ScriptedChat {
    fn complete(&self, _: &ChatRequest) -> Result<ChatResponse, ProviderError> {
        let i = self.cursor.fetch_add(1, Ordering::Relaxed);
        self.script[i.min(self.script.len() - 1)]
            .clone()
            .map(ChatResponse::text)
    }
}

fn last_message(request: &ChatRequest) -> &str {
    request.messages.last().map_or("", |m| m.text.as_str())
}

/// Response-generation mock: echoes the last dialogue utterance of the prompt.
#[derive(Debug, Clone, Copy, Default)]
pub struct EchoLastUtterance;

impl ChatProvider for EchoLastUtterance {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, ProviderError> {
        let prompt = last_message(request);
        let body = match prompt.rfind("Response:") {
            Some(i) => &prompt[..i],
            None => prompt,
        };
        let last = body.lines().rev().map(str::trim).find(|l| !l.is_empty()).unwrap_or("");
        let text = last
            .split_once(": ")
            .filter(|(who, _)| who.len() <= 8)
            .map_or(last, |(_, rest)| rest);
        Ok(ChatResponse::text(text))
    }
}

/// Refinement mock: reads the final `Persona 1:` / `Persona 2:` lines of the
/// prompt and answers in the refinement output format, choosing a strategy
/// from a hash of the two personas.
#[derive(Debug, Clone, Copy, Default)]
pub struct HeuristicRefiner {
    pub seed: u64,
}

impl HeuristicRefiner {
    fn find_last(prompt: &str, key: &str) -> String {
        prompt
            .lines()
            .rev()
            .find_map(|l| l.trim().strip_prefix(key))
            .map(|s| s.trim().to_string())
            .unwrap_or_default()
    }
}

impl ChatProvider for HeuristicRefiner {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, ProviderError> {
        let prompt = last_message(request);
        let a = Self::find_last(prompt, "Persona 1:");
        let b = Self::find_last(prompt, "Persona 2:");
        let stem = |s: &str| s.trim_end_matches(['.', '!', '?']).to_string();
        let text = match fnv64(self.seed, &[a.as_bytes(), b.as_bytes()]) % 3 {
            0 => format!(
                "Rationale: Both personas describe the same circumstance at different times.\n[Resolution]: {}, but now {}",
                stem(&a),
                b
            ),
            1 => format!(
                "Rationale: The personas stem from unrelated situations.\n[Disambiguation]:\n- Persona 1: {} in some situations.\n- Persona 2: {} in other situations.",
                stem(&a),
                stem(&b)
            ),
            _ => "Rationale: The two personas pertain to different aspects and can coexist.\n[NO_CONFLICT]".to_string(),
        };
        Ok(ChatResponse::text(text))
    }
}
