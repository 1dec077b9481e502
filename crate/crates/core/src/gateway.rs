//! Chat-completions client with retries, request pacing, per-prompt
//! fan-out and an on-disk response cache.
//!
//! Requests are `POST {base_url}/chat/completions` with body
//! `{"model", "messages": [{"role": "user", "content"}], "temperature"}`;
//! the reply text is `choices[0].message.content`, kept byte for byte.
//!
//! # Cache layout
//!
//! One JSON file per response in the cache directory, named
//! `<sha256>.json` where the hash covers the model name, the SHA-256 of
//! the prompt text, the response index and the temperature. Each file holds
//! `{"model", "temperature", "response_index", "prompt_sha256", "text"}`.
//! Files are written to a temporary name and renamed into place, so a crash
//! never leaves a partial entry behind.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use futures::stream::{self, Stream, StreamExt};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;
pub use url::Url;

use crate::prompt::RenderedPrompt;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EndpointConfig {
    pub base_url: Url,
    pub model_name: String,
    /// Environment variable holding the bearer token. Keys are never read
    /// from configuration files.
    #[serde(default)]
    pub api_key_env: Option<String>,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "one")]
    pub n_responses: usize,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    /// 0 disables pacing.
    #[serde(default)]
    pub requests_per_minute: u32,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
    #[serde(default = "default_backoff_ms")]
    pub backoff_base_ms: u64,
    #[serde(default = "default_backoff_cap_ms")]
    pub backoff_cap_ms: u64,
    #[serde(default)]
    pub cache_dir: Option<PathBuf>,
}

fn one() -> usize {
    1
}
fn default_retries() -> u32 {
    3
}
fn default_timeout_secs() -> u64 {
    120
}
fn default_backoff_ms() -> u64 {
    500
}
fn default_backoff_cap_ms() -> u64 {
    30_000
}

impl EndpointConfig {
    pub fn new(base_url: Url, model_name: impl Into<String>) -> Self {
        EndpointConfig {
            base_url,
            model_name: model_name.into(),
            api_key_env: None,
            temperature: 0.0,
            n_responses: 1,
            max_retries: default_retries(),
            requests_per_minute: 0,
            timeout_secs: default_timeout_secs(),
            backoff_base_ms: default_backoff_ms(),
            backoff_cap_ms: default_backoff_cap_ms(),
            cache_dir: None,
        }
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return Err(GatewayError::Config(format!(
                "temperature must be >= 0, got {}",
                self.temperature
            )));
        }
        if self.n_responses == 0 {
            return Err(GatewayError::Config("n_responses must be >= 1".into()));
        }
        Ok(())
    }

    /// Delay before retry number `attempt` (0-based): exponential from
    /// `backoff_base_ms`, capped at `backoff_cap_ms`. Never decreases.
    pub fn backoff_delay(&self, attempt: u32) -> Duration {
        let factor = 1u64.checked_shl(attempt.min(63)).unwrap_or(u64::MAX);
        let ms = self
            .backoff_base_ms
            .saturating_mul(factor)
            .min(self.backoff_cap_ms.max(self.backoff_base_ms));
        Duration::from_millis(ms)
    }

    fn completions_url(&self) -> Result<Url, GatewayError> {
        let mut base = self.base_url.clone();
        if !base.path().ends_with('/') {
            let path = format!("{}/", base.path());
            base.set_path(&path);
        }
        base.join("chat/completions")
            .map_err(|e| GatewayError::Config(format!("bad base_url: {e}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelResponse {
    pub pair_id: String,
    pub response_index: usize,
    pub text: String,
    #[serde(with = "duration_ms")]
    pub latency: Duration,
    pub endpoint_model: String,
    #[serde(default)]
    pub cached: bool,
}

mod duration_ms {
    use std::time::Duration;

    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(d.as_millis() as u64)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        Ok(Duration::from_millis(u64::deserialize(d)?))
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GatewayError {
    #[error("authentication rejected (HTTP {status}): {body}")]
    Auth { status: u16, body: String },
    #[error("API key environment variable {0} is not set")]
    MissingApiKey(String),
    #[error("gave up after {attempts} attempts: {last}")]
    RetriesExhausted { attempts: u32, last: String },
    #[error("malformed endpoint reply: {0}")]
    MalformedReply(String),
    #[error("request rejected (HTTP {status}): {body}")]
    Rejected { status: u16, body: String },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("cache error: {0}")]
    Cache(String),
}

impl GatewayError {
    /// Errors that make the whole run pointless rather than one pair.
    pub fn is_fatal(&self) -> bool {
        matches!(
            self,
            GatewayError::Auth { .. } | GatewayError::MissingApiKey(_) | GatewayError::Config(_)
        )
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CacheEntry {
    model: String,
    temperature: f64,
    response_index: usize,
    prompt_sha256: String,
    text: String,
}

/// Content-addressed response store.
#[derive(Debug)]
pub struct ResponseCache {
    dir: PathBuf,
    write_lock: Mutex<()>,
}

impl ResponseCache {
    pub fn open(dir: impl Into<PathBuf>) -> std::io::Result<Self> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir)?;
        Ok(ResponseCache {
            dir,
            write_lock: Mutex::new(()),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn key(model: &str, prompt: &str, response_index: usize, temperature: f64) -> String {
        let prompt_hash = hex::encode(Sha256::digest(prompt.as_bytes()));
        let mut h = Sha256::new();
        h.update(model.as_bytes());
        h.update([0]);
        h.update(prompt_hash.as_bytes());
        h.update([0]);
        h.update(response_index.to_le_bytes());
        h.update(temperature.to_bits().to_le_bytes());
        hex::encode(h.finalize())
    }

    fn path_for(&self, key: &str) -> PathBuf {
        self.dir.join(format!("{key}.json"))
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let bytes = std::fs::read(self.path_for(key)).ok()?;
        match serde_json::from_slice::<CacheEntry>(&bytes) {
            Ok(entry) => Some(entry.text),
            Err(e) => {
                log::warn!("ignoring corrupt cache entry {key}: {e}");
                None
            }
        }
    }

    fn put(&self, key: &str, entry: &CacheEntry) -> Result<(), GatewayError> {
        let _guard = self.write_lock.lock().unwrap_or_else(|e| e.into_inner());
        let tmp = self.dir.join(format!(".{key}.tmp"));
        let body =
            serde_json::to_vec_pretty(entry).map_err(|e| GatewayError::Cache(e.to_string()))?;
        std::fs::write(&tmp, body).map_err(|e| GatewayError::Cache(e.to_string()))?;
        std::fs::rename(&tmp, self.path_for(key)).map_err(|e| GatewayError::Cache(e.to_string()))
    }
}

/// Spaces request starts at least `interval` apart.
#[derive(Debug)]
struct Pacer {
    interval: Duration,
    next_slot: tokio::sync::Mutex<Instant>,
}

impl Pacer {
    fn new(requests_per_minute: u32) -> Option<Self> {
        (requests_per_minute > 0).then(|| Pacer {
            interval: Duration::from_secs(60) / requests_per_minute,
            next_slot: tokio::sync::Mutex::new(Instant::now()),
        })
    }

    async fn wait(&self) {
        let wait_until = {
            let mut next = self.next_slot.lock().await;
            let now = Instant::now();
            let slot = (*next).max(now);
            *next = slot + self.interval;
            slot
        };
        tokio::time::sleep_until(wait_until.into()).await;
    }
}

pub struct Gateway {
    cfg: EndpointConfig,
    client: reqwest::Client,
    url: Url,
    cache: Option<ResponseCache>,
    pacer: Option<Pacer>,
    network_requests: AtomicU64,
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: [ChatMessage<'a>; 1],
    temperature: f64,
}

#[derive(Serialize)]
struct ChatMessage<'a> {
    role: &'a str,
    content: &'a str,
}

enum Attempt {
    Done(String),
    Retry(String),
    Fatal(GatewayError),
}

pub type BatchItem = (String, Result<Vec<ModelResponse>, GatewayError>);

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct BatchSummary {
    pub succeeded: usize,
    pub failed: usize,
    pub failures: Vec<(String, String)>,
}

impl BatchSummary {
    pub fn from_items(items: &[BatchItem]) -> Self {
        let mut s = BatchSummary::default();
        for (id, r) in items {
            match r {
                Ok(_) => s.succeeded += 1,
                Err(e) => {
                    s.failed += 1;
                    s.failures.push((id.clone(), e.to_string()));
                }
            }
        }
        s
    }
}

impl Gateway {
    pub fn new(cfg: EndpointConfig) -> Result<Self, GatewayError> {
        cfg.validate()?;
        let client = reqwest::Client::builder()
            .timeout(Duration::from_secs(cfg.timeout_secs.max(1)))
            .build()
            .map_err(|e| GatewayError::Config(e.to_string()))?;
        let cache = match &cfg.cache_dir {
            Some(dir) => {
                Some(ResponseCache::open(dir).map_err(|e| GatewayError::Cache(e.to_string()))?)
            }
            None => None,
        };
        Ok(Gateway {
            url: cfg.completions_url()?,
            pacer: Pacer::new(cfg.requests_per_minute),
            cfg,
            client,
            cache,
            network_requests: AtomicU64::new(0),
        })
    }

    pub fn config(&self) -> &EndpointConfig {
        &self.cfg
    }

    /// HTTP requests issued so far, retries included.
    pub fn network_requests(&self) -> u64 {
        self.network_requests.load(Ordering::Relaxed)
    }

    /// Obtains `n_responses` independent responses for one prompt.
    pub async fn complete(
        &self,
        prompt: &RenderedPrompt,
    ) -> Result<Vec<ModelResponse>, GatewayError> {
        let mut out = Vec::with_capacity(self.cfg.n_responses);
        for index in 0..self.cfg.n_responses {
            out.push(self.complete_one(prompt, index).await?);
        }
        Ok(out)
    }

    async fn complete_one(
        &self,
        prompt: &RenderedPrompt,
        response_index: usize,
    ) -> Result<ModelResponse, GatewayError> {
        let key = ResponseCache::key(
            &self.cfg.model_name,
            &prompt.text,
            response_index,
            self.cfg.temperature,
        );
        if let Some(text) = self.cache.as_ref().and_then(|c| c.get(&key)) {
            return Ok(ModelResponse {
                pair_id: prompt.pair_id.clone(),
                response_index,
                text,
                latency: Duration::ZERO,
                endpoint_model: self.cfg.model_name.clone(),
                cached: true,
            });
        }

        let api_key = match &self.cfg.api_key_env {
            Some(var) => {
                Some(std::env::var(var).map_err(|_| GatewayError::MissingApiKey(var.clone()))?)
            }
            None => None,
        };
        let started = Instant::now();
        let mut attempt = 0u32;
        let text = loop {
            match self.attempt(&prompt.text, api_key.as_deref()).await {
                Attempt::Done(text) => break text,
                Attempt::Fatal(e) => return Err(e),
                Attempt::Retry(reason) => {
                    if attempt >= self.cfg.max_retries {
                        return Err(GatewayError::RetriesExhausted {
                            attempts: attempt + 1,
                            last: reason,
                        });
                    }
                    let delay = self.cfg.backoff_delay(attempt);
                    log::debug!(
                        "pair {}: transient failure ({reason}), retrying in {delay:?}",
                        prompt.pair_id
                    );
                    tokio::time::sleep(delay).await;
                    attempt += 1;
                }
            }
        };

        if let Some(cache) = &self.cache {
            cache.put(
                &key,
                &CacheEntry {
                    model: self.cfg.model_name.clone(),
                    temperature: self.cfg.temperature,
                    response_index,
                    prompt_sha256: hex::encode(Sha256::digest(prompt.text.as_bytes())),
                    text: text.clone(),
                },
            )?;
        }
        Ok(ModelResponse {
            pair_id: prompt.pair_id.clone(),
            response_index,
            text,
            latency: started.elapsed(),
            endpoint_model: self.cfg.model_name.clone(),
            cached: false,
        })
    }

    async fn attempt(&self, prompt: &str, api_key: Option<&str>) -> Attempt {
        if let Some(p) = &self.pacer {
            p.wait().await;
        }
        let body = ChatRequest {
            model: &self.cfg.model_name,
            messages: [ChatMessage {
                role: "user",
                content: prompt,
            }],
            temperature: self.cfg.temperature,
        };
        let mut req = self.client.post(self.url.clone()).json(&body);
        if let Some(key) = api_key {
            req = req.bearer_auth(key);
        }
        self.network_requests.fetch_add(1, Ordering::Relaxed);
        let resp = match req.send().await {
            Ok(r) => r,
            Err(e) if e.is_timeout() || e.is_connect() || e.is_request() => {
                return Attempt::Retry(e.to_string())
            }
            Err(e) => return Attempt::Fatal(GatewayError::MalformedReply(e.to_string())),
        };
        let status = resp.status();
        let body = match resp.text().await {
            Ok(b) => b,
            Err(e) => return Attempt::Retry(format!("reading body: {e}")),
        };
        if status.as_u16() == 401 || status.as_u16() == 403 {
            return Attempt::Fatal(GatewayError::Auth {
                status: status.as_u16(),
                body,
            });
        }
        if status.as_u16() == 429 || status.is_server_error() {
            return Attempt::Retry(format!("HTTP {status}"));
        }
        if !status.is_success() {
            return Attempt::Fatal(GatewayError::Rejected {
                status: status.as_u16(),
                body,
            });
        }
        match extract_content(&body) {
            Some(text) => Attempt::Done(text),
            None => Attempt::Fatal(GatewayError::MalformedReply(body)),
        }
    }

    /// Runs every prompt with at most `parallelism` in flight, yielding
    /// results in completion order.
    pub fn complete_batch<'a>(
        &'a self,
        prompts: &'a [RenderedPrompt],
        parallelism: usize,
    ) -> impl Stream<Item = BatchItem> + 'a {
        stream::iter(prompts)
            .map(move |p| async move { (p.pair_id.clone(), self.complete(p).await) })
            .buffer_unordered(parallelism.max(1))
    }

    /// Drains [`complete_batch`](Self::complete_batch) and summarizes it.
    pub async fn run_batch(
        &self,
        prompts: &[RenderedPrompt],
        parallelism: usize,
    ) -> (Vec<BatchItem>, BatchSummary) {
        let items: Vec<BatchItem> = self.complete_batch(prompts, parallelism).collect().await;
        let summary = BatchSummary::from_items(&items);
        (items, summary)
    }
}

fn extract_content(body: &str) -> Option<String> {
    let v: serde_json::Value = serde_json::from_str(body).ok()?;
    v.get("choices")?
        .get(0)?
        .get("message")?
        .get("content")?
        .as_str()
        .map(str::to_string)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> EndpointConfig {
        EndpointConfig::new(Url::parse("http://localhost:1/v1").unwrap(), "m")
    }

    #[test]
    fn backoff_is_nondecreasing_and_capped() {
        let c = cfg();
        let delays: Vec<_> = (0..80).map(|a| c.backoff_delay(a)).collect();
        assert!(delays.windows(2).all(|w| w[0] <= w[1]));
        assert_eq!(delays[0], Duration::from_millis(500));
        assert_eq!(delays[1], Duration::from_millis(1000));
        assert_eq!(*delays.last().unwrap(), Duration::from_millis(30_000));
    }

    #[test]
    fn completions_url_joins_path() {
        assert_eq!(
            cfg().completions_url().unwrap().as_str(),
            "http://localhost:1/v1/chat/completions"
        );
        let mut c = cfg();
        c.base_url = Url::parse("http://localhost:1/v1/").unwrap();
        assert_eq!(
            c.completions_url().unwrap().as_str(),
            "http://localhost:1/v1/chat/completions"
        );
    }

    #[test]
    fn cache_key_depends_on_every_component() {
        let base = ResponseCache::key("m", "p", 0, 0.0);
        assert_ne!(base, ResponseCache::key("m2", "p", 0, 0.0));
        assert_ne!(base, ResponseCache::key("m", "p2", 0, 0.0));
        assert_ne!(base, ResponseCache::key("m", "p", 1, 0.0));
        assert_ne!(base, ResponseCache::key("m", "p", 0, 0.7));
        assert_eq!(base, ResponseCache::key("m", "p", 0, 0.0));
    }

    #[test]
    fn content_extraction() {
        assert_eq!(
            extract_content(r#"{"choices":[{"message":{"role":"assistant","content":"hi"}}]}"#),
            Some("hi".into())
        );
        assert_eq!(extract_content(r#"{"choices":[]}"#), None);
        assert_eq!(extract_content("not json"), None);
    }

    #[test]
    fn config_validation() {
        let mut c = cfg();
        c.temperature = -0.1;
        assert!(c.validate().is_err());
        let mut c = cfg();
        c.n_responses = 0;
        assert!(c.validate().is_err());
        assert!(cfg().validate().is_ok());
    }

    #[test]
    fn config_from_toml_defaults() {
        let c: EndpointConfig =
            toml::from_str("base_url = \"http://x/v1\"\nmodel_name = \"m\"").unwrap();
        assert_eq!(c.temperature, 0.0);
        assert_eq!(c.n_responses, 1);
        assert_eq!(c.api_key_env, None);
    }
}
