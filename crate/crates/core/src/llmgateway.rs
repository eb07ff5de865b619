//! Chat-completion access with an on-disk response cache.
//!
//! A [`Backend`] turns a [`GenerationRequest`] into a
//! [`GenerationResponse`] and never fails outright: transport and protocol
//! problems come back as `finish_reason = error`. [`CachedGateway`] wraps a
//! backend with a directory of one JSON file per [`CacheKey`], so a second
//! identical run is served entirely from disk.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{bio_to_spans, LabeledSentence};
use crate::instructgen::{serialize_extractions, NO_ENTITIES};
use crate::promptkit::final_input;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub prompt: String,
    pub model: String,
    pub temperature: f64,
    pub max_tokens: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl GenerationRequest {
    pub fn new(prompt: impl Into<String>, model: impl Into<String>) -> Self {
        GenerationRequest { prompt: prompt.into(), model: model.into(), temperature: 0.0, max_tokens: 256, seed: None }
    }

    pub fn cache_key(&self) -> CacheKey {
        CacheKey::of(self)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FinishReason {
    Stop,
    Length,
    Error,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationResponse {
    pub text: String,
    pub finish_reason: FinishReason,
    pub latency_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl GenerationResponse {
    pub fn error(message: impl Into<String>, latency_ms: u64) -> Self {
        GenerationResponse {
            text: String::new(),
            finish_reason: FinishReason::Error,
            latency_ms,
            error: Some(message.into()),
        }
    }

    pub fn is_error(&self) -> bool {
        self.finish_reason == FinishReason::Error
    }
}

/// SHA-256 over the request fields that influence generation.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CacheKey(String);

impl CacheKey {
    pub fn of(req: &GenerationRequest) -> CacheKey {
        #[derive(Serialize)]
        struct Keyed<'a> {
            model: &'a str,
            temperature: f64,
            max_tokens: u32,
            seed: Option<u64>,
            prompt: &'a str,
        }
        let canonical = serde_json::to_vec(&Keyed {
            model: &req.model,
            temperature: req.temperature,
            max_tokens: req.max_tokens,
            seed: req.seed,
            prompt: &req.prompt,
        })
        .expect("request serializes");
        CacheKey(hex::encode(Sha256::digest(&canonical)))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for CacheKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

pub trait Backend: Send + Sync {
    fn complete(&self, req: &GenerationRequest) -> GenerationResponse;
}

impl<B: Backend + ?Sized> Backend for Arc<B> {
    fn complete(&self, req: &GenerationRequest) -> GenerationResponse {
        (**self).complete(req)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EndpointConfig {
    /// Base URL up to and including the API version, e.g. `http://localhost:8000/v1`.
    pub base_url: String,
    /// Name of the environment variable holding the bearer token.
    pub api_key_env: String,
    pub timeout_ms: u64,
    /// Extra attempts after the first one for transient failures.
    pub retries: u32,
    /// First backoff delay; doubles on each retry.
    pub backoff_ms: u64,
}

impl Default for EndpointConfig {
    fn default() -> Self {
        EndpointConfig {
            base_url: "http://127.0.0.1:8000/v1".into(),
            api_key_env: "PICO_ICL_API_KEY".into(),
            timeout_ms: 120_000,
            retries: 3,
            backoff_ms: 500,
        }
    }
}

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("http client: {0}")]
    Client(String),
    #[error("{0}")]
    Protocol(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

enum Attempt<T> {
    Done(T),
    Retry(String),
    Fail(String),
}

fn classify_status<T>(status: reqwest::StatusCode, body: &str) -> Attempt<T> {
    let msg = format!("HTTP {status}: {}", body.chars().take(300).collect::<String>());
    if status.as_u16() == 429 || status.is_server_error() || status.as_u16() == 408 {
        Attempt::Retry(msg)
    } else {
        Attempt::Fail(msg)
    }
}

/// POST JSON with retries on transport errors, 408, 429 and 5xx.
fn post_with_retries(
    client: &reqwest::blocking::Client,
    config: &EndpointConfig,
    url: &str,
    body: &serde_json::Value,
) -> Result<serde_json::Value, String> {
    let api_key = std::env::var(&config.api_key_env).ok().filter(|k| !k.is_empty());
    let mut last = String::new();
    for attempt in 0..=config.retries {
        if attempt > 0 {
            let delay = config.backoff_ms.saturating_mul(1 << (attempt - 1).min(16));
            std::thread::sleep(Duration::from_millis(delay));
        }
        let mut rb = client.post(url).json(body);
        if let Some(key) = &api_key {
            rb = rb.bearer_auth(key);
        }
        let outcome = match rb.send() {
            Err(e) => Attempt::Retry(format!("transport: {e}")),
            Ok(resp) => {
                let status = resp.status();
                match resp.text() {
                    Err(e) => Attempt::Retry(format!("reading body: {e}")),
                    Ok(text) if status.is_success() => match serde_json::from_str(&text) {
                        Ok(v) => Attempt::Done(v),
                        Err(e) => Attempt::Fail(format!("invalid JSON body: {e}")),
                    },
                    Ok(text) => classify_status(status, &text),
                }
            }
        };
        match outcome {
            Attempt::Done(v) => return Ok(v),
            Attempt::Fail(m) => return Err(m),
            Attempt::Retry(m) => {
                log::warn!("attempt {} of {} failed: {m}", attempt + 1, config.retries + 1);
                last = m;
            }
        }
    }
    Err(format!("giving up after {} attempts: {last}", config.retries + 1))
}

fn build_client(config: &EndpointConfig) -> Result<reqwest::blocking::Client, GatewayError> {
    reqwest::blocking::Client::builder()
        .timeout(Duration::from_millis(config.timeout_ms))
        .build()
        .map_err(|e| GatewayError::Client(e.to_string()))
}

/// OpenAI-compatible `/chat/completions` client. The prompt goes out as a
/// single user message.
pub struct HttpBackend {
    config: EndpointConfig,
    client: reqwest::blocking::Client,
}

impl HttpBackend {
    pub fn new(config: EndpointConfig) -> Result<Self, GatewayError> {
        let client = build_client(&config)?;
        Ok(HttpBackend { config, client })
    }

    fn url(&self) -> String {
        format!("{}/chat/completions", self.config.base_url.trim_end_matches('/'))
    }
}

impl Backend for HttpBackend {
    fn complete(&self, req: &GenerationRequest) -> GenerationResponse {
        let started = Instant::now();
        let mut body = serde_json::json!({
            "model": req.model,
            "messages": [{"role": "user", "content": req.prompt}],
            "temperature": req.temperature,
            "max_tokens": req.max_tokens,
        });
        if let Some(seed) = req.seed {
            body["seed"] = seed.into();
        }
        let elapsed = || started.elapsed().as_millis() as u64;
        let value = match post_with_retries(&self.client, &self.config, &self.url(), &body) {
            Ok(v) => v,
            Err(e) => return GenerationResponse::error(e, elapsed()),
        };
        let choice = &value["choices"][0];
        let Some(text) = choice["message"]["content"].as_str() else {
            return GenerationResponse::error("response has no choices[0].message.content", elapsed());
        };
        let finish_reason = match choice["finish_reason"].as_str() {
            Some("length") => FinishReason::Length,
            _ => FinishReason::Stop,
        };
        GenerationResponse { text: text.to_string(), finish_reason, latency_ms: elapsed(), error: None }
    }
}

/// Test backend that answers with the gold extraction lines of the sentence
/// named after the prompt's final `input:` marker, ignoring demonstrations.
/// Unknown sentences get `no entities`.
///
/// Token budget: output words beyond `max_tokens` are cut and the response
/// finishes with `length`.
#[derive(Debug, Clone, Default)]
pub struct MockOracle {
    gold: HashMap<String, String>,
}

impl MockOracle {
    pub fn from_sentences<'a>(sentences: impl IntoIterator<Item = &'a LabeledSentence>) -> Self {
        let mut gold = HashMap::new();
        for s in sentences {
            gold.entry(s.text()).or_insert_with(|| serialize_extractions(&bio_to_spans(s)));
        }
        MockOracle { gold }
    }

    pub fn len(&self) -> usize {
        self.gold.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gold.is_empty()
    }
}

impl Backend for MockOracle {
    fn complete(&self, req: &GenerationRequest) -> GenerationResponse {
        let answer =
            final_input(&req.prompt).and_then(|input| self.gold.get(input)).map_or(NO_ENTITIES, String::as_str);
        let words: Vec<&str> = answer.split_whitespace().collect();
        if words.len() > req.max_tokens as usize {
            let text = words[..req.max_tokens as usize].join(" ");
            return GenerationResponse { text, finish_reason: FinishReason::Length, latency_ms: 0, error: None };
        }
        GenerationResponse { text: answer.to_string(), finish_reason: FinishReason::Stop, latency_ms: 0, error: None }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GatewayStats {
    pub backend_calls: usize,
    pub cache_hits: usize,
    pub cache_misses: usize,
    pub corrupt_entries: usize,
    pub errors: usize,
}

#[derive(Serialize, Deserialize)]
struct CacheEntry {
    key: CacheKey,
    request: GenerationRequest,
    response: GenerationResponse,
}

/// Backend plus optional response cache.
///
/// Error responses are returned but never cached, so a rerun retries them.
/// With `offline` set a cache miss is answered with an error response
/// instead of reaching the backend.
pub struct CachedGateway {
    backend: Arc<dyn Backend>,
    cache_dir: Option<PathBuf>,
    offline: bool,
    backend_calls: AtomicUsize,
    cache_hits: AtomicUsize,
    cache_misses: AtomicUsize,
    corrupt_entries: AtomicUsize,
    errors: AtomicUsize,
}

impl CachedGateway {
    pub fn new(backend: Arc<dyn Backend>, cache_dir: Option<PathBuf>) -> Result<Self, GatewayError> {
        if let Some(dir) = &cache_dir {
            fs::create_dir_all(dir).map_err(|source| GatewayError::Io { path: dir.clone(), source })?;
        }
        Ok(CachedGateway {
            backend,
            cache_dir,
            offline: false,
            backend_calls: AtomicUsize::new(0),
            cache_hits: AtomicUsize::new(0),
            cache_misses: AtomicUsize::new(0),
            corrupt_entries: AtomicUsize::new(0),
            errors: AtomicUsize::new(0),
        })
    }

    pub fn offline(mut self, offline: bool) -> Self {
        self.offline = offline;
        self
    }

    pub fn stats(&self) -> GatewayStats {
        GatewayStats {
            backend_calls: self.backend_calls.load(Ordering::SeqCst),
            cache_hits: self.cache_hits.load(Ordering::SeqCst),
            cache_misses: self.cache_misses.load(Ordering::SeqCst),
            corrupt_entries: self.corrupt_entries.load(Ordering::SeqCst),
            errors: self.errors.load(Ordering::SeqCst),
        }
    }

    fn entry_path(dir: &Path, key: &CacheKey) -> PathBuf {
        dir.join(format!("{key}.json"))
    }

    /// Call the backend directly, bypassing the cache.
    pub fn complete(&self, req: &GenerationRequest) -> GenerationResponse {
        self.backend_calls.fetch_add(1, Ordering::SeqCst);
        let resp = self.backend.complete(req);
        if resp.is_error() {
            self.errors.fetch_add(1, Ordering::SeqCst);
        }
        resp
    }

    pub fn cached_complete(&self, req: &GenerationRequest) -> GenerationResponse {
        let Some(dir) = &self.cache_dir else {
            return self.complete(req);
        };
        let key = req.cache_key();
        let path = Self::entry_path(dir, &key);
        match fs::read(&path) {
            Ok(bytes) => match serde_json::from_slice::<CacheEntry>(&bytes) {
                Ok(entry) if entry.key == key && entry.request == *req => {
                    self.cache_hits.fetch_add(1, Ordering::SeqCst);
                    return entry.response;
                }
                _ => {
                    log::warn!("corrupt cache entry {}, regenerating", path.display());
                    self.corrupt_entries.fetch_add(1, Ordering::SeqCst);
                }
            },
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {}
            Err(e) => {
                log::warn!("unreadable cache entry {}: {e}", path.display());
                self.corrupt_entries.fetch_add(1, Ordering::SeqCst);
            }
        }
        self.cache_misses.fetch_add(1, Ordering::SeqCst);
        if self.offline {
            self.errors.fetch_add(1, Ordering::SeqCst);
            return GenerationResponse::error(format!("cache miss for {key} in offline mode"), 0);
        }
        let resp = self.complete(req);
        if !resp.is_error() {
            let entry = CacheEntry { key, request: req.clone(), response: resp.clone() };
            if let Err(e) = write_atomic(dir, &path, &entry) {
                log::warn!("could not write cache entry {}: {e}", path.display());
            }
        }
        resp
    }
}

/// Write to a temp file in `dir`, then rename over `path`.
fn write_atomic<T: Serialize>(dir: &Path, path: &Path, value: &T) -> std::io::Result<()> {
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    serde_json::to_writer_pretty(&mut tmp, value)?;
    tmp.write_all(b"\n")?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

/// Client for an OpenAI-compatible `/embeddings` endpoint.
pub struct EmbeddingClient {
    config: EndpointConfig,
    model: String,
    client: reqwest::blocking::Client,
}

impl EmbeddingClient {
    pub fn new(config: EndpointConfig, model: impl Into<String>) -> Result<Self, GatewayError> {
        let client = build_client(&config)?;
        Ok(EmbeddingClient { config, model: model.into(), client })
    }

    /// Embed a batch of texts; the result follows the input order.
    pub fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, GatewayError> {
        if texts.is_empty() {
            return Ok(Vec::new());
        }
        let url = format!("{}/embeddings", self.config.base_url.trim_end_matches('/'));
        let body = serde_json::json!({ "model": self.model, "input": texts });
        let value = post_with_retries(&self.client, &self.config, &url, &body).map_err(GatewayError::Protocol)?;
        let data = value["data"]
            .as_array()
            .ok_or_else(|| GatewayError::Protocol("embedding response has no `data` array".into()))?;
        if data.len() != texts.len() {
            return Err(GatewayError::Protocol(format!("asked for {} embeddings, got {}", texts.len(), data.len())));
        }
        let mut out = vec![Vec::new(); texts.len()];
        for (pos, item) in data.iter().enumerate() {
            let index = item["index"].as_u64().map_or(pos, |i| i as usize);
            let vector = item["embedding"]
                .as_array()
                .ok_or_else(|| GatewayError::Protocol(format!("item {pos} has no `embedding`")))?
                .iter()
                .map(|x| x.as_f64().map(|f| f as f32))
                .collect::<Option<Vec<f32>>>()
                .ok_or_else(|| GatewayError::Protocol(format!("item {pos} has a non-numeric value")))?;
            let slot = out
                .get_mut(index)
                .ok_or_else(|| GatewayError::Protocol(format!("embedding index {index} out of range")))?;
            *slot = vector;
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{parse_conll, LabelScheme, Split};
    use crate::promptkit::{assemble_prompt, PromptSpec};

    fn gold() -> Vec<LabeledSentence> {
        parse_conll(
            "Budesonide B-INT\nrelieves O\nrhinitis B-OUT\n\nNothing O\nhere O\n".as_bytes(),
            &LabelScheme::pico(),
            Split::Test,
        )
        .unwrap()
        .sentences
    }

    fn prompt_for(text: &str) -> String {
        assemble_prompt(&PromptSpec::new("T", vec![], text).unwrap())
    }

    #[test]
    fn mock_echoes_gold() {
        let mock = MockOracle::from_sentences(&gold());
        let r = mock.complete(&GenerationRequest::new(prompt_for("Budesonide relieves rhinitis"), "m"));
        assert_eq!(r.text, "\"Budesonide\" is Interventions\n\"rhinitis\" is Outcomes");
        assert_eq!(r.finish_reason, FinishReason::Stop);
        let r = mock.complete(&GenerationRequest::new(prompt_for("never seen"), "m"));
        assert_eq!(r.text, NO_ENTITIES);
    }

    #[test]
    fn mock_truncates_to_token_budget() {
        let mock = MockOracle::from_sentences(&gold());
        let mut req = GenerationRequest::new(prompt_for("Nothing here"), "m");
        req.max_tokens = 1;
        let r = mock.complete(&req);
        assert_eq!(r.finish_reason, FinishReason::Length);
        assert_eq!(r.text, "no");
    }

    #[test]
    fn key_changes_with_every_field() {
        let base =
            GenerationRequest { prompt: "p".into(), model: "m".into(), temperature: 0.0, max_tokens: 10, seed: None };
        let k = base.cache_key();
        assert_eq!(k, base.clone().cache_key());
        assert_eq!(k.as_str().len(), 64);
        let variants = [
            GenerationRequest { prompt: "q".into(), ..base.clone() },
            GenerationRequest { model: "n".into(), ..base.clone() },
            GenerationRequest { temperature: 0.7, ..base.clone() },
            GenerationRequest { max_tokens: 11, ..base.clone() },
            GenerationRequest { seed: Some(1), ..base.clone() },
        ];
        for v in variants {
            assert_ne!(v.cache_key(), k, "{v:?}");
        }
    }

    #[test]
    fn cache_serves_second_call() {
        let dir = tempfile::tempdir().unwrap();
        let mock: Arc<dyn Backend> = Arc::new(MockOracle::from_sentences(&gold()));
        let gw = CachedGateway::new(mock, Some(dir.path().to_path_buf())).unwrap();
        let req = GenerationRequest::new(prompt_for("Budesonide relieves rhinitis"), "m");
        let a = gw.cached_complete(&req);
        let b = gw.cached_complete(&req);
        assert_eq!(a, b);
        assert_eq!(gw.stats().backend_calls, 1);
        assert_eq!(gw.stats().cache_hits, 1);

        let warmer = GenerationRequest { temperature: 0.5, ..req };
        gw.cached_complete(&warmer);
        assert_eq!(gw.stats().backend_calls, 2);
    }

    #[test]
    fn corrupt_entry_is_rewritten() {
        let dir = tempfile::tempdir().unwrap();
        let mock: Arc<dyn Backend> = Arc::new(MockOracle::from_sentences(&gold()));
        let req = GenerationRequest::new(prompt_for("Nothing here"), "m");
        let path = dir.path().join(format!("{}.json", req.cache_key()));
        fs::write(&path, b"{ not json").unwrap();
        let gw = CachedGateway::new(mock, Some(dir.path().to_path_buf())).unwrap();
        assert_eq!(gw.cached_complete(&req).text, NO_ENTITIES);
        let stats = gw.stats();
        assert_eq!((stats.corrupt_entries, stats.backend_calls), (1, 1));
        assert!(serde_json::from_slice::<CacheEntry>(&fs::read(&path).unwrap()).is_ok());
        gw.cached_complete(&req);
        assert_eq!(gw.stats().cache_hits, 1);
    }

    #[test]
    fn offline_miss_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let mock: Arc<dyn Backend> = Arc::new(MockOracle::default());
        let gw = CachedGateway::new(mock, Some(dir.path().to_path_buf())).unwrap().offline(true);
        let r = gw.cached_complete(&GenerationRequest::new("x", "m"));
        assert!(r.is_error());
        assert_eq!(gw.stats().backend_calls, 0);
    }

    struct Failing;
    impl Backend for Failing {
        fn complete(&self, _: &GenerationRequest) -> GenerationResponse {
            GenerationResponse::error("boom", 0)
        }
    }

    #[test]
    fn errors_are_not_cached() {
        let dir = tempfile::tempdir().unwrap();
        let gw = CachedGateway::new(Arc::new(Failing), Some(dir.path().to_path_buf())).unwrap();
        let req = GenerationRequest::new("x", "m");
        gw.cached_complete(&req);
        gw.cached_complete(&req);
        let s = gw.stats();
        assert_eq!((s.backend_calls, s.errors, s.cache_hits), (2, 2, 0));
    }

    #[test]
    fn unreachable_endpoint_errors_after_retries() {
        let config = EndpointConfig {
            base_url: "http://127.0.0.1:9/v1".into(),
            retries: 2,
            backoff_ms: 1,
            timeout_ms: 2_000,
            ..Default::default()
        };
        let backend = HttpBackend::new(config).unwrap();
        let r = backend.complete(&GenerationRequest::new("x", "m"));
        assert_eq!(r.finish_reason, FinishReason::Error);
        assert!(r.error.unwrap().contains("after 3 attempts"));
    }
}
