//! Text embeddings for concepts, fetched from an `/embed` HTTP endpoint and
//! cached on disk.
//!
//! Wire contract: `POST {endpoint}/embed` with `{"model_id", "texts"}`
//! answers `{"model_id", "dim", "embeddings"}`, and HTTP 400 for an unknown
//! model. Returned vectors are re-normalized here whatever the server sends.
//!
//! The cache is a JSONL file of `{"model_id", "text", "embedding"}` records,
//! loaded in full on construction and appended one line per new text. With
//! no endpoint configured the embedder serves from the cache alone.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Mutex, OnceLock, RwLock};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(10);

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("no texts to embed")]
    NoTexts,

    #[error("text at position {index} is empty")]
    EmptyText { index: usize },

    #[error("embedder unavailable ({reason}); no cached embedding for {missing:?}")]
    Unavailable { missing: Vec<String>, reason: String },

    #[error("embedder broke its contract: {0}")]
    Contract(String),

    #[error("embedder rejected the request with HTTP {status}: {body}")]
    Rejected { status: u16, body: String },

    #[error("invalid embedder configuration: {0}")]
    Config(String),

    #[error("embedding cache {path}: {message}")]
    Cache { path: PathBuf, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedRequest {
    pub model_id: String,
    pub texts: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedResponse {
    pub model_id: String,
    pub dim: usize,
    pub embeddings: Vec<Vec<f32>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheRecord {
    pub model_id: String,
    pub text: String,
    pub embedding: Vec<f32>,
}

#[derive(Debug, Clone)]
pub struct EmbedderConfig {
    /// Base URL; `/embed` is appended.
    pub endpoint: Option<String>,
    pub timeout: Duration,
    pub expected_dim: usize,
    pub model_id: String,
    pub cache_path: Option<PathBuf>,
}

impl EmbedderConfig {
    pub fn new(model_id: impl Into<String>, expected_dim: usize) -> Self {
        Self {
            endpoint: None,
            timeout: DEFAULT_TIMEOUT,
            expected_dim,
            model_id: model_id.into(),
            cache_path: None,
        }
    }

    pub fn with_endpoint(mut self, url: impl Into<String>) -> Self {
        self.endpoint = Some(url.into());
        self
    }

    pub fn with_cache(mut self, path: impl Into<PathBuf>) -> Self {
        self.cache_path = Some(path.into());
        self
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }
}

pub trait Embedder: Send + Sync {
    fn model_id(&self) -> &str;

    fn dim(&self) -> usize;

    /// Unit-norm embeddings in input order.
    fn embed_texts(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, EmbedError>;
}

pub struct HttpEmbedder {
    config: EmbedderConfig,
    client: OnceLock<reqwest::blocking::Client>,
    cache: RwLock<HashMap<String, Vec<f32>>>,
    writer: Mutex<Option<File>>,
    requests: AtomicUsize,
}

impl std::fmt::Debug for HttpEmbedder {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HttpEmbedder")
            .field("config", &self.config)
            .field("cached", &self.cached_len())
            .finish()
    }
}

fn cache_err(path: &Path, message: impl Into<String>) -> EmbedError {
    EmbedError::Cache {
        path: path.to_owned(),
        message: message.into(),
    }
}

/// Records for `model_id`. A final line without a newline is an interrupted
/// append and is skipped.
fn load_cache(path: &Path, model_id: &str) -> Result<HashMap<String, Vec<f32>>, EmbedError> {
    let mut out = HashMap::new();
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(out),
        Err(e) => return Err(cache_err(path, e.to_string())),
    };
    let complete = text.ends_with('\n');
    let lines: Vec<&str> = text.lines().collect();
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: CacheRecord = match serde_json::from_str(line) {
            Ok(r) => r,
            Err(_) if i + 1 == lines.len() && !complete => break,
            Err(e) => return Err(cache_err(path, format!("line {}: {e}", i + 1))),
        };
        if rec.model_id == model_id {
            out.insert(rec.text, rec.embedding);
        }
    }
    Ok(out)
}

impl HttpEmbedder {
    pub fn new(config: EmbedderConfig) -> Result<Self, EmbedError> {
        if config.expected_dim == 0 {
            return Err(EmbedError::Config("expected_dim must be positive".into()));
        }
        if config.model_id.is_empty() {
            return Err(EmbedError::Config("model_id must not be empty".into()));
        }
        let (cache, writer) = match &config.cache_path {
            Some(path) => {
                let cache = load_cache(path, &config.model_id)?;
                if let Some((text, v)) = cache.iter().find(|(_, v)| v.len() != config.expected_dim) {
                    return Err(cache_err(
                        path,
                        format!("{text:?} cached with dim {}, expected {}", v.len(), config.expected_dim),
                    ));
                }
                if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                    std::fs::create_dir_all(dir).map_err(|e| cache_err(path, e.to_string()))?;
                }
                let file = OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(path)
                    .map_err(|e| cache_err(path, e.to_string()))?;
                (cache, Some(file))
            }
            None => (HashMap::new(), None),
        };
        Ok(Self {
            config,
            client: OnceLock::new(),
            cache: RwLock::new(cache),
            writer: Mutex::new(writer),
            requests: AtomicUsize::new(0),
        })
    }

    pub fn config(&self) -> &EmbedderConfig {
        &self.config
    }

    /// Number of HTTP requests sent so far.
    pub fn request_count(&self) -> usize {
        self.requests.load(Ordering::SeqCst)
    }

    pub fn cached_len(&self) -> usize {
        self.cache.read().expect("cache lock").len()
    }

    pub fn cached(&self, text: &str) -> Option<Vec<f32>> {
        self.cache.read().expect("cache lock").get(text).cloned()
    }

    fn client(&self) -> Result<&reqwest::blocking::Client, EmbedError> {
        if let Some(c) = self.client.get() {
            return Ok(c);
        }
        let built = reqwest::blocking::Client::builder()
            .timeout(self.config.timeout)
            .build()
            .map_err(|e| EmbedError::Config(e.to_string()))?;
        Ok(self.client.get_or_init(|| built))
    }

    fn fetch(&self, endpoint: &str, missing: &[String]) -> Result<Vec<Vec<f32>>, EmbedError> {
        let unavailable = |reason: String| EmbedError::Unavailable {
            missing: missing.to_vec(),
            reason,
        };
        let url = format!("{}/embed", endpoint.trim_end_matches('/'));
        let body = EmbedRequest {
            model_id: self.config.model_id.clone(),
            texts: missing.to_vec(),
        };
        self.requests.fetch_add(1, Ordering::SeqCst);
        let resp = self
            .client()?
            .post(&url)
            .json(&body)
            .send()
            .map_err(|e| unavailable(e.to_string()))?;
        let status = resp.status();
        if status == reqwest::StatusCode::BAD_REQUEST {
            return Err(EmbedError::Rejected {
                status: status.as_u16(),
                body: resp.text().unwrap_or_default(),
            });
        }
        if !status.is_success() {
            return Err(unavailable(format!("HTTP {status}")));
        }
        let bytes = resp.bytes().map_err(|e| unavailable(e.to_string()))?;
        let parsed: EmbedResponse =
            serde_json::from_slice(&bytes).map_err(|e| EmbedError::Contract(format!("malformed response: {e}")))?;
        self.check_response(parsed, missing)
    }

    fn check_response(&self, resp: EmbedResponse, missing: &[String]) -> Result<Vec<Vec<f32>>, EmbedError> {
        let want = self.config.expected_dim;
        if resp.model_id != self.config.model_id {
            return Err(EmbedError::Contract(format!(
                "asked for model {:?}, got {:?}",
                self.config.model_id, resp.model_id
            )));
        }
        if resp.dim != want {
            return Err(EmbedError::Contract(format!("expected dim {want}, server reports {}", resp.dim)));
        }
        if resp.embeddings.len() != missing.len() {
            return Err(EmbedError::Contract(format!(
                "sent {} texts, received {} embeddings",
                missing.len(),
                resp.embeddings.len()
            )));
        }
        resp.embeddings
            .into_iter()
            .zip(missing)
            .map(|(v, text)| {
                if v.len() != want {
                    return Err(EmbedError::Contract(format!(
                        "embedding for {text:?} has dim {}, expected {want}",
                        v.len()
                    )));
                }
                textcav_core::linalg::l2_normalize(&v)
                    .map_err(|e| EmbedError::Contract(format!("embedding for {text:?}: {e}")))
            })
            .collect()
    }

    fn remember(&self, texts: &[String], vectors: &[Vec<f32>]) -> Result<(), EmbedError> {
        let mut writer = self.writer.lock().expect("writer lock");
        let mut cache = self.cache.write().expect("cache lock");
        let mut lines = String::new();
        for (t, v) in texts.iter().zip(vectors) {
            if cache.contains_key(t) {
                continue;
            }
            cache.insert(t.clone(), v.clone());
            let rec = CacheRecord {
                model_id: self.config.model_id.clone(),
                text: t.clone(),
                embedding: v.clone(),
            };
            lines.push_str(&serde_json::to_string(&rec).expect("serializable record"));
            lines.push('\n');
        }
        drop(cache);
        if let (Some(file), false) = (writer.as_mut(), lines.is_empty()) {
            let path = self.config.cache_path.as_deref().unwrap_or(Path::new(""));
            file.write_all(lines.as_bytes())
                .and_then(|_| file.flush())
                .map_err(|e| cache_err(path, e.to_string()))?;
        }
        Ok(())
    }
}

impl Embedder for HttpEmbedder {
    fn model_id(&self) -> &str {
        &self.config.model_id
    }

    fn dim(&self) -> usize {
        self.config.expected_dim
    }

    fn embed_texts(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, EmbedError> {
        if texts.is_empty() {
            return Err(EmbedError::NoTexts);
        }
        if let Some(index) = texts.iter().position(|t| t.trim().is_empty()) {
            return Err(EmbedError::EmptyText { index });
        }
        let mut missing: Vec<String> = Vec::new();
        {
            let cache = self.cache.read().expect("cache lock");
            for t in texts {
                if !cache.contains_key(t) && !missing.contains(t) {
                    missing.push(t.clone());
                }
            }
        }
        if !missing.is_empty() {
            let Some(endpoint) = self.config.endpoint.clone() else {
                return Err(EmbedError::Unavailable {
                    missing,
                    reason: "no endpoint configured".into(),
                });
            };
            let fetched = self.fetch(&endpoint, &missing)?;
            self.remember(&missing, &fetched)?;
        }
        let cache = self.cache.read().expect("cache lock");
        Ok(texts.iter().map(|t| cache[t].clone()).collect())
    }
}
