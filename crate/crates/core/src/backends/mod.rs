//! Contracts for the external model capabilities.
//!
//! Each capability is its own trait so that deployments can mix remote and
//! local implementations. [`remote`] speaks the JSON wire protocol described
//! in [`wire`]; [`mock`] provides pure, seeded stand-ins for tests and demos.

use std::fmt;
use std::time::Duration;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub mod config;
pub mod mock;
pub mod remote;
pub mod wire;

pub use config::{BackendSpec, BackendsConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Capability {
    Caption,
    Embed,
    Generate,
    Ground,
    Genq,
}

impl Capability {
    pub const ALL: [Capability; 5] = [
        Capability::Caption,
        Capability::Embed,
        Capability::Generate,
        Capability::Ground,
        Capability::Genq,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Capability::Caption => "caption",
            Capability::Embed => "embed",
            Capability::Generate => "generate",
            Capability::Ground => "ground",
            Capability::Genq => "genq",
        }
    }

    /// Wire path of the capability's endpoint.
    pub fn path(self) -> &'static str {
        match self {
            Capability::Caption => "/v1/caption",
            Capability::Embed => "/v1/embed",
            Capability::Generate => "/v1/generate",
            Capability::Ground => "/v1/ground",
            Capability::Genq => "/v1/genq",
        }
    }
}

impl fmt::Display for Capability {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BackendError {
    #[error("transport failure after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("backend returned HTTP {status}: {message}")]
    Status { status: u16, message: String },
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("contract violation: {0}")]
    Contract(String),
}

/// An image handed to a backend: its manifest id plus raw file bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageData {
    pub id: String,
    pub bytes: Vec<u8>,
}

impl ImageData {
    pub fn new(id: impl Into<String>, bytes: Vec<u8>) -> Self {
        Self {
            id: id.into(),
            bytes,
        }
    }
}

/// A dense embedding with finite components.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector(Vec<f64>);

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Result<Self, BackendError> {
        if values.is_empty() {
            return Err(BackendError::Protocol("embedding has dimension 0".into()));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(BackendError::Protocol(format!(
                "embedding component {i} is not finite"
            )));
        }
        Ok(Self(values))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    /// Component-wise scaling, used by tests of scale invariance.
    pub fn scaled(&self, factor: f64) -> Result<Self, BackendError> {
        Self::new(self.0.iter().map(|v| v * factor).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grounding {
    pub present: bool,
    pub score: f64,
}

/// Where a remote backend lives and how patiently to talk to it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendEndpoint {
    pub base_url: String,
    #[serde(default = "BackendEndpoint::default_timeout_ms")]
    pub timeout_ms: u64,
    #[serde(default = "BackendEndpoint::default_max_retries")]
    pub max_retries: u32,
}

impl BackendEndpoint {
    pub const MAX_RETRIES_LIMIT: u32 = 5;

    fn default_timeout_ms() -> u64 {
        30_000
    }

    fn default_max_retries() -> u32 {
        2
    }

    pub fn new(base_url: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            timeout_ms: Self::default_timeout_ms(),
            max_retries: Self::default_max_retries(),
        }
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        if self.timeout_ms == 0 {
            return Err(BackendError::Contract("timeout_ms must be positive".into()));
        }
        if self.max_retries > Self::MAX_RETRIES_LIMIT {
            return Err(BackendError::Contract(format!(
                "max_retries {} exceeds {}",
                self.max_retries,
                Self::MAX_RETRIES_LIMIT
            )));
        }
        reqwest::Url::parse(&self.base_url)
            .map_err(|e| BackendError::Contract(format!("bad base_url `{}`: {e}", self.base_url)))?;
        Ok(())
    }

    pub fn timeout(&self) -> Duration {
        Duration::from_millis(self.timeout_ms)
    }
}

#[async_trait]
pub trait Captioner: Send + Sync {
    /// Returns exactly `n` captions in generation order. Duplicates and empty
    /// strings may occur; callers deduplicate.
    async fn caption(&self, image: &ImageData, n: usize) -> Result<Vec<String>, BackendError>;
}

#[async_trait]
pub trait Embedder: Send + Sync {
    /// One vector per input text, in input order, all of the same dimension.
    async fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, BackendError>;
}

#[async_trait]
pub trait Generator: Send + Sync {
    async fn generate(&self, prompt: &str, max_new_tokens: u32) -> Result<String, BackendError>;
}

#[async_trait]
pub trait Grounder: Send + Sync {
    async fn ground(&self, image: &ImageData, phrase: &str) -> Result<Grounding, BackendError>;
}

#[async_trait]
pub trait QuestionGenerator: Send + Sync {
    /// A single question for which `answer` is the expected answer.
    async fn generate_question(&self, context: &str, answer: &str)
        -> Result<String, BackendError>;
}

pub(crate) fn check_caption_request(n: usize) -> Result<(), BackendError> {
    if n == 0 {
        return Err(BackendError::Contract("caption count must be at least 1".into()));
    }
    Ok(())
}

pub(crate) fn check_embed_request(texts: &[String]) -> Result<(), BackendError> {
    if texts.is_empty() {
        return Err(BackendError::Contract("embed needs at least one text".into()));
    }
    if let Some(i) = texts.iter().position(|t| t.is_empty()) {
        return Err(BackendError::Contract(format!("embed text {i} is empty")));
    }
    Ok(())
}

pub(crate) fn check_non_empty(what: &str, value: &str) -> Result<(), BackendError> {
    if value.trim().is_empty() {
        return Err(BackendError::Contract(format!("{what} must be non-empty")));
    }
    Ok(())
}
