//! HTTP provider bindings.
//!
//! Chat and embeddings use the OpenAI-compatible wire format
//! (`/chat/completions`, `/embeddings`). The NLI endpoint takes
//! `{"pairs":[{"premise":..,"hypothesis":..}]}` and returns
//! `{"results":[{"entailment":..,"neutral":..,"contradiction":..}]}`.

use std::sync::Arc;
use std::time::Duration;

use personamem_core::persona::RelationType;
use personamem_core::provider::{
    ChatProvider, ChatRequest, ChatResponse, CommonsenseProvider, EmbeddingProvider, NliDistribution, NliProvider,
    ProviderError, Role, Usage,
};
use serde_json::{json, Value};

use crate::config::{ChatEndpoint, EmbeddingEndpoint, NliEndpoint, RetryConfig};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HttpReply {
    pub status: u16,
    pub body: String,
}

/// Minimal POST-JSON transport so clients can be tested without a network.
pub trait HttpTransport: Send + Sync {
    fn post_json(&self, url: &str, bearer: Option<&str>, body: &str) -> Result<HttpReply, ProviderError>;
}

pub struct UreqTransport {
    agent: ureq::Agent,
}

impl UreqTransport {
    pub fn new(timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        UreqTransport { agent }
    }
}

impl HttpTransport for UreqTransport {
    fn post_json(&self, url: &str, bearer: Option<&str>, body: &str) -> Result<HttpReply, ProviderError> {
        let mut req = self.agent.post(url).header("Content-Type", "application/json");
        if let Some(key) = bearer {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        match req.send(body) {
            Ok(mut resp) => {
                let status = resp.status().as_u16();
                let body = resp
                    .body_mut()
                    .read_to_string()
                    .map_err(|e| ProviderError::Transport(e.to_string()))?;
                Ok(HttpReply { status, body })
            }
            Err(ureq::Error::Timeout(_)) => Err(ProviderError::Timeout),
            Err(e) => Err(ProviderError::Transport(e.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub base_delay: Duration,
    pub max_delay: Duration,
}

impl From<&RetryConfig> for RetryPolicy {
    fn from(c: &RetryConfig) -> Self {
        RetryPolicy {
            max_retries: c.max_retries,
            base_delay: Duration::from_millis(c.base_delay_ms),
            max_delay: Duration::from_millis(c.max_delay_ms),
        }
    }
}

impl RetryPolicy {
    pub fn delay(&self, attempt: u32) -> Duration {
        self.base_delay
            .saturating_mul(1u32 << attempt.min(16))
            .min(self.max_delay)
    }

    /// Run `op` until it succeeds, fails permanently, or retries run out.
    /// Returns the value and the number of attempts made.
    pub fn run<T>(
        &self,
        sleep: fn(Duration),
        mut op: impl FnMut() -> Result<T, ProviderError>,
    ) -> Result<(T, u32), ProviderError> {
        let mut attempt = 0;
        loop {
            attempt += 1;
            match op() {
                Ok(v) => return Ok((v, attempt)),
                Err(e) if e.is_retryable() && attempt <= self.max_retries => {
                    let wait = self.delay(attempt - 1);
                    log::warn!("attempt {attempt} failed ({e}); retrying in {wait:?}");
                    sleep(wait);
                }
                Err(e) if e.is_retryable() => {
                    return Err(ProviderError::Exhausted {
                        attempts: attempt,
                        last: e.to_string(),
                    })
                }
                Err(e) => return Err(e),
            }
        }
    }
}

pub fn status_error(status: u16, body: &str) -> Option<ProviderError> {
    let snippet: String = body.chars().take(200).collect();
    match status {
        200..=299 => None,
        401 | 403 => Some(ProviderError::Auth(format!("HTTP {status}: {snippet}"))),
        429 => Some(ProviderError::RateLimited),
        408 | 504 => Some(ProviderError::Timeout),
        500..=599 => Some(ProviderError::Transport(format!("HTTP {status}: {snippet}"))),
        _ => Some(ProviderError::BadResponse(format!("HTTP {status}: {snippet}"))),
    }
}

/// Read an API key from the named environment variable.
pub fn api_key(env: Option<&str>) -> Result<Option<String>, ProviderError> {
    match env {
        None => Ok(None),
        Some(name) => match std::env::var(name) {
            Ok(v) if !v.trim().is_empty() => Ok(Some(v)),
            _ => Err(ProviderError::Auth(format!("environment variable {name} is not set"))),
        },
    }
}

/// POSTs JSON with retries.
pub struct JsonClient {
    transport: Arc<dyn HttpTransport>,
    url: String,
    key: Option<String>,
    retry: RetryPolicy,
    sleep: fn(Duration),
}

impl JsonClient {
    pub fn new(transport: Arc<dyn HttpTransport>, url: String, key: Option<String>, retry: RetryPolicy) -> Self {
        JsonClient {
            transport,
            url,
            key,
            retry,
            sleep: std::thread::sleep,
        }
    }

    pub fn with_sleep(mut self, sleep: fn(Duration)) -> Self {
        self.sleep = sleep;
        self
    }

    pub fn post(&self, body: &Value) -> Result<Value, ProviderError> {
        let payload = body.to_string();
        let (value, attempts) = self.retry.run(self.sleep, || {
            let reply = self.transport.post_json(&self.url, self.key.as_deref(), &payload)?;
            if let Some(e) = status_error(reply.status, &reply.body) {
                return Err(e);
            }
            serde_json::from_str::<Value>(&reply.body).map_err(|e| ProviderError::BadResponse(e.to_string()))
        })?;
        if attempts > 1 {
            log::info!("{} succeeded after {attempts} attempts", self.url);
        }
        Ok(value)
    }
}

fn endpoint(base: &str, path: &str) -> String {
    format!("{}/{}", base.trim_end_matches('/'), path)
}

fn bad(msg: &str) -> ProviderError {
    ProviderError::BadResponse(msg.to_string())
}

pub struct HttpChat {
    client: JsonClient,
    pub model: String,
}

impl HttpChat {
    /// Fails with `Auth` before any request if the key variable is missing.
    pub fn new(
        cfg: &ChatEndpoint,
        retry: RetryPolicy,
        transport: Arc<dyn HttpTransport>,
    ) -> Result<Self, ProviderError> {
        let key = api_key(cfg.api_key_env.as_deref())?;
        Ok(HttpChat {
            client: JsonClient::new(transport, endpoint(&cfg.base_url, "chat/completions"), key, retry),
            model: cfg.model.clone(),
        })
    }

    pub fn with_sleep(mut self, sleep: fn(Duration)) -> Self {
        self.client = self.client.with_sleep(sleep);
        self
    }

    pub fn body(&self, request: &ChatRequest) -> Value {
        let mut messages = Vec::new();
        if let Some(system) = &request.system {
            messages.push(json!({"role": "system", "content": system}));
        }
        for m in &request.messages {
            let role = match m.role {
                Role::System => "system",
                Role::User => "user",
                Role::Assistant => "assistant",
            };
            messages.push(json!({"role": role, "content": m.text}));
        }
        json!({
            "model": self.model,
            "messages": messages,
            "max_tokens": request.max_tokens,
            "temperature": request.temperature,
        })
    }
}

impl ChatProvider for HttpChat {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, ProviderError> {
        let v = self.client.post(&self.body(request))?;
        let text = v["choices"][0]["message"]["content"]
            .as_str()
            .ok_or_else(|| bad("missing choices[0].message.content"))?
            .to_string();
        let usage = v.get("usage").and_then(|u| {
            Some(Usage {
                prompt_tokens: u.get("prompt_tokens")?.as_u64()?,
                completion_tokens: u.get("completion_tokens")?.as_u64()?,
            })
        });
        Ok(ChatResponse { text, usage })
    }
}

pub struct HttpNli {
    client: JsonClient,
}

impl HttpNli {
    pub fn new(
        cfg: &NliEndpoint,
        retry: RetryPolicy,
        transport: Arc<dyn HttpTransport>,
    ) -> Result<Self, ProviderError> {
        let key = api_key(cfg.api_key_env.as_deref())?;
        Ok(HttpNli {
            client: JsonClient::new(transport, cfg.url.clone(), key, retry),
        })
    }
}

fn parse_distribution(v: &Value) -> Result<NliDistribution, ProviderError> {
    let get = |k: &str| {
        v.get(k)
            .and_then(Value::as_f64)
            .ok_or_else(|| bad(&format!("missing {k}")))
    };
    NliDistribution {
        entail: get("entailment")?,
        neutral: get("neutral")?,
        contradiction: get("contradiction")?,
    }
    .validate()
}

impl NliProvider for HttpNli {
    fn classify(&self, premise: &str, hypothesis: &str) -> Result<NliDistribution, ProviderError> {
        let mut out = self.classify_batch(&[(premise, hypothesis)])?;
        out.pop().ok_or_else(|| bad("empty NLI result"))
    }

    fn classify_batch(&self, pairs: &[(&str, &str)]) -> Result<Vec<NliDistribution>, ProviderError> {
        let body = json!({
            "pairs": pairs.iter().map(|(p, h)| json!({"premise": p, "hypothesis": h})).collect::<Vec<_>>()
        });
        let v = self.client.post(&body)?;
        let results = v["results"].as_array().ok_or_else(|| bad("missing results"))?;
        if results.len() != pairs.len() {
            return Err(bad("NLI result count does not match request"));
        }
        results.iter().map(parse_distribution).collect()
    }
}

pub struct HttpEmbedder {
    client: JsonClient,
    pub model: String,
}

impl HttpEmbedder {
    pub fn new(
        cfg: &EmbeddingEndpoint,
        retry: RetryPolicy,
        transport: Arc<dyn HttpTransport>,
    ) -> Result<Self, ProviderError> {
        let key = api_key(cfg.api_key_env.as_deref())?;
        Ok(HttpEmbedder {
            client: JsonClient::new(transport, endpoint(&cfg.base_url, "embeddings"), key, retry),
            model: cfg.model.clone(),
        })
    }
}

impl EmbeddingProvider for HttpEmbedder {
    fn embed(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>, ProviderError> {
        let v = self.client.post(&json!({"model": self.model, "input": texts}))?;
        let data = v["data"].as_array().ok_or_else(|| bad("missing data"))?;
        let mut rows: Vec<(u64, Vec<f64>)> = data
            .iter()
            .enumerate()
            .map(|(i, d)| {
                let index = d.get("index").and_then(Value::as_u64).unwrap_or(i as u64);
                let vector = d["embedding"]
                    .as_array()
                    .ok_or_else(|| bad("missing embedding"))?
                    .iter()
                    .map(|x| x.as_f64().ok_or_else(|| bad("non-numeric embedding")))
                    .collect::<Result<Vec<f64>, _>>()?;
                Ok((index, vector))
            })
            .collect::<Result<_, ProviderError>>()?;
        rows.sort_by_key(|(i, _)| *i);
        if rows.len() != texts.len() {
            return Err(bad("embedding count does not match request"));
        }
        Ok(rows.into_iter().map(|(_, v)| v).collect())
    }
}

fn relation_hint(r: RelationType) -> &'static str {
    match r {
        RelationType::XAttr => "how others would describe the speaker",
        RelationType::XEffect => "what happens to the speaker as a result",
        RelationType::XIntent => "why the speaker does this",
        RelationType::XNeed => "what the speaker needed beforehand",
        RelationType::XReact => "how the speaker feels about it",
        RelationType::XWant => "what the speaker wants next",
        RelationType::OEffect => "what happens to other people as a result",
        RelationType::OReact => "how other people feel about it",
        RelationType::OWant => "what other people want as a result",
    }
}

/// Commonsense expansion through a chat model, one request per relation.
pub struct ChatCommonsense<C> {
    pub llm: C,
    pub max_tokens: u32,
}

impl<C: ChatProvider> ChatCommonsense<C> {
    pub fn prompt(persona_text: &str, relation: RelationType) -> String {
        format!(
            "Make a commonsense inference about the speaker of this sentence.\n\
             Sentence: {persona_text}\n\
             Infer {} ({relation}).\n\
             Answer with one short first-person sentence and nothing else.",
            relation_hint(relation)
        )
    }
}

impl<C: ChatProvider> CommonsenseProvider for ChatCommonsense<C> {
    fn generate(&self, persona_text: &str, relation: RelationType) -> Result<Vec<String>, ProviderError> {
        let reply = self.llm.complete(&ChatRequest::user(
            Self::prompt(persona_text, relation),
            self.max_tokens,
        ))?;
        Ok(reply
            .text
            .lines()
            .map(|l| l.trim().trim_start_matches(['-', '*', ' ']).trim())
            .filter(|l| !l.is_empty())
            .take(1)
            .map(str::to_string)
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Mutex;

    struct Fake {
        replies: Mutex<Vec<HttpReply>>,
        seen: Mutex<Vec<String>>,
    }

    impl Fake {
        fn new(replies: Vec<(u16, &str)>) -> Arc<Self> {
            Arc::new(Fake {
                replies: Mutex::new(
                    replies
                        .into_iter()
                        .rev()
                        .map(|(status, body)| HttpReply {
                            status,
                            body: body.to_string(),
                        })
                        .collect(),
                ),
                seen: Mutex::new(Vec::new()),
            })
        }

        fn calls(&self) -> usize {
            self.seen.lock().unwrap().len()
        }
    }

    impl HttpTransport for Fake {
        fn post_json(&self, _: &str, _: Option<&str>, body: &str) -> Result<HttpReply, ProviderError> {
            self.seen.lock().unwrap().push(body.to_string());
            self.replies
                .lock()
                .unwrap()
                .pop()
                .ok_or_else(|| ProviderError::Transport("no reply".into()))
        }
    }

    fn no_sleep(_: Duration) {}

    fn retry() -> RetryPolicy {
        RetryPolicy {
            max_retries: 3,
            base_delay: Duration::from_millis(1),
            max_delay: Duration::from_millis(4),
        }
    }

    fn chat_cfg(env: Option<&str>) -> ChatEndpoint {
        ChatEndpoint {
            base_url: "http://localhost:9/v1/".into(),
            model: "m".into(),
            api_key_env: env.map(str::to_string),
            timeout_secs: 5,
        }
    }

    const OK: &str = r#"{"choices":[{"message":{"role":"assistant","content":"hello"}}],"usage":{"prompt_tokens":5,"completion_tokens":1}}"#;

    #[test]
    fn retries_rate_limits_then_succeeds() {
        let fake = Fake::new(vec![(429, "slow down"), (429, "slow down"), (200, OK)]);
        let chat = HttpChat::new(&chat_cfg(None), retry(), fake.clone())
            .unwrap()
            .with_sleep(no_sleep);
        let out = chat.complete(&ChatRequest::user("hi", 8)).unwrap();
        assert_eq!(out.text, "hello");
        assert_eq!(out.usage.unwrap().prompt_tokens, 5);
        assert_eq!(fake.calls(), 3);
        let sent: Value = serde_json::from_str(&fake.seen.lock().unwrap()[0]).unwrap();
        assert_eq!(sent["messages"][0]["content"], "hi");
        assert_eq!(sent["temperature"], 0.0);
    }

    #[test]
    fn gives_up_after_budget() {
        let fake = Fake::new(vec![(503, ""); 5]);
        let chat = HttpChat::new(&chat_cfg(None), retry(), fake.clone())
            .unwrap()
            .with_sleep(no_sleep);
        let err = chat.complete(&ChatRequest::user("hi", 8)).unwrap_err();
        assert!(matches!(err, ProviderError::Exhausted { attempts: 4, .. }));
        assert_eq!(fake.calls(), 4);
    }

    #[test]
    fn auth_failures_are_not_retried() {
        let fake = Fake::new(vec![(401, "no"), (200, OK)]);
        let chat = HttpChat::new(&chat_cfg(None), retry(), fake.clone())
            .unwrap()
            .with_sleep(no_sleep);
        assert!(matches!(
            chat.complete(&ChatRequest::user("hi", 8)),
            Err(ProviderError::Auth(_))
        ));
        assert_eq!(fake.calls(), 1);
    }

    #[test]
    fn missing_key_fails_before_network() {
        let fake = Fake::new(vec![(200, OK)]);
        let err = HttpChat::new(&chat_cfg(Some("PERSONAMEM_TEST_UNSET_KEY")), retry(), fake.clone())
            .err()
            .unwrap();
        assert!(matches!(err, ProviderError::Auth(_)));
        assert_eq!(fake.calls(), 0);
    }

    #[test]
    fn nli_batch_round_trip() {
        let body = r#"{"results":[{"entailment":0.1,"neutral":0.1,"contradiction":0.8},{"entailment":0.5,"neutral":0.5,"contradiction":0.0}]}"#;
        let fake = Fake::new(vec![(200, body)]);
        let cfg = NliEndpoint {
            url: "http://x/nli".into(),
            api_key_env: None,
            timeout_secs: 5,
        };
        let nli = HttpNli::new(&cfg, retry(), fake.clone()).unwrap();
        let out = nli.classify_batch(&[("a", "b"), ("b", "a")]).unwrap();
        assert_eq!(out[0].contradiction, 0.8);
        assert_eq!(out.len(), 2);
    }

    #[test]
    fn embeddings_sorted_by_index() {
        let body = r#"{"data":[{"index":1,"embedding":[0.0,1.0]},{"index":0,"embedding":[1.0,0.0]}]}"#;
        let fake = Fake::new(vec![(200, body)]);
        let cfg = EmbeddingEndpoint {
            base_url: "http://x/v1".into(),
            model: "e".into(),
            api_key_env: None,
            timeout_secs: 5,
        };
        let e = HttpEmbedder::new(&cfg, retry(), fake).unwrap();
        assert_eq!(e.embed(&["a", "b"]).unwrap(), vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
    }

    #[test]
    fn commonsense_takes_first_line() {
        let chat = personamem_core::mock::ScriptedChat::replies(["- I want to stay awake.\nextra"]);
        let cs = ChatCommonsense {
            llm: chat,
            max_tokens: 32,
        };
        assert_eq!(
            cs.generate("I drink coffee.", RelationType::XWant).unwrap(),
            vec!["I want to stay awake."]
        );
        assert!(
            ChatCommonsense::<personamem_core::mock::ScriptedChat>::prompt("x", RelationType::OWant).contains("oWant")
        );
    }
}
