//! HTTP clients for the backend wire protocol.
//!
//! Retries use a fixed backoff and only fire on transport failures, timeouts
//! and 5xx responses. All endpoints are idempotent and the serialized body
//! is reused as-is for every attempt.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Duration;

use async_trait::async_trait;
use serde::de::DeserializeOwned;
use serde::Serialize;

use super::wire::{self, ErrorBody};
use super::{
    check_caption_request, check_embed_request, check_non_empty, BackendEndpoint, BackendError,
    Captioner, Capability, Embedder, EmbeddingVector, Generator, Grounder, Grounding, ImageData,
    QuestionGenerator,
};

pub const DEFAULT_BACKOFF: Duration = Duration::from_millis(200);

#[derive(Debug, Clone)]
pub struct RemoteClient {
    endpoint: BackendEndpoint,
    http: reqwest::Client,
    backoff: Duration,
}

enum Attempt {
    Retry(String),
    Fail(BackendError),
}

impl RemoteClient {
    pub fn new(endpoint: BackendEndpoint) -> Result<Self, BackendError> {
        endpoint.validate()?;
        let http = reqwest::Client::builder()
            .timeout(endpoint.timeout())
            .build()
            .map_err(|e| BackendError::Contract(format!("cannot build HTTP client: {e}")))?;
        Ok(Self {
            endpoint,
            http,
            backoff: DEFAULT_BACKOFF,
        })
    }

    pub fn with_backoff(mut self, backoff: Duration) -> Self {
        self.backoff = backoff;
        self
    }

    pub fn endpoint(&self) -> &BackendEndpoint {
        &self.endpoint
    }

    fn url(&self, capability: Capability) -> String {
        format!(
            "{}{}",
            self.endpoint.base_url.trim_end_matches('/'),
            capability.path()
        )
    }

    /// POSTs `request` to the capability's endpoint and decodes the reply.
    pub async fn call<Req, Resp>(
        &self,
        capability: Capability,
        request: &Req,
    ) -> Result<Resp, BackendError>
    where
        Req: Serialize + ?Sized,
        Resp: DeserializeOwned,
    {
        let body = serde_json::to_vec(request)
            .map_err(|e| BackendError::Contract(format!("cannot encode request: {e}")))?;
        let url = self.url(capability);
        let attempts_allowed = self.endpoint.max_retries + 1;
        let mut last_error = String::new();

        for attempt in 1..=attempts_allowed {
            if attempt > 1 {
                tokio::time::sleep(self.backoff).await;
            }
            match self.attempt(&url, body.clone()).await {
                Ok(bytes) => {
                    return serde_json::from_slice(&bytes).map_err(|e| {
                        BackendError::Protocol(format!("{capability} response: {e}"))
                    })
                }
                Err(Attempt::Fail(err)) => return Err(err),
                Err(Attempt::Retry(msg)) => {
                    tracing::debug!(%url, attempt, error = %msg, "backend attempt failed");
                    last_error = msg;
                }
            }
        }

        Err(BackendError::Transport {
            attempts: attempts_allowed,
            message: last_error,
        })
    }

    async fn attempt(&self, url: &str, body: Vec<u8>) -> Result<Vec<u8>, Attempt> {
        let response = self
            .http
            .post(url)
            .header(reqwest::header::CONTENT_TYPE, "application/json")
            .body(body)
            .send()
            .await
            .map_err(|e| Attempt::Retry(e.to_string()))?;
        let status = response.status();
        let bytes = response
            .bytes()
            .await
            .map_err(|e| Attempt::Retry(e.to_string()))?;
        if status.is_success() {
            return Ok(bytes.to_vec());
        }
        let message = serde_json::from_slice::<ErrorBody>(&bytes)
            .map(|b| b.error)
            .unwrap_or_else(|_| String::from_utf8_lossy(&bytes).into_owned());
        if status.is_server_error() {
            Err(Attempt::Retry(format!("HTTP {}: {message}", status.as_u16())))
        } else {
            Err(Attempt::Fail(BackendError::Status {
                status: status.as_u16(),
                message,
            }))
        }
    }
}

#[derive(Debug, Clone)]
pub struct RemoteCaptioner(pub RemoteClient);

#[async_trait]
impl Captioner for RemoteCaptioner {
    async fn caption(&self, image: &ImageData, n: usize) -> Result<Vec<String>, BackendError> {
        check_caption_request(n)?;
        let request = wire::CaptionRequest {
            image_b64: wire::encode_image(&image.bytes),
            n,
        };
        let response: wire::CaptionResponse = self.0.call(Capability::Caption, &request).await?;
        if response.captions.len() != n {
            return Err(BackendError::Protocol(format!(
                "requested {n} captions, received {}",
                response.captions.len()
            )));
        }
        Ok(response.captions)
    }
}

/// Remote embedder; the first response fixes the dimension for the
/// lifetime of the instance.
#[derive(Debug)]
pub struct RemoteEmbedder {
    client: RemoteClient,
    dim: AtomicUsize,
}

impl RemoteEmbedder {
    pub fn new(client: RemoteClient) -> Self {
        Self {
            client,
            dim: AtomicUsize::new(0),
        }
    }

    /// Dimension seen so far, if any call has succeeded.
    pub fn dim(&self) -> Option<usize> {
        match self.dim.load(Ordering::Acquire) {
            0 => None,
            d => Some(d),
        }
    }
}

#[async_trait]
impl Embedder for RemoteEmbedder {
    async fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, BackendError> {
        check_embed_request(texts)?;
        let request = wire::EmbedRequest {
            texts: texts.to_vec(),
        };
        let response: wire::EmbedResponse = self.client.call(Capability::Embed, &request).await?;
        if response.vectors.len() != texts.len() {
            return Err(BackendError::Protocol(format!(
                "sent {} texts, received {} vectors",
                texts.len(),
                response.vectors.len()
            )));
        }
        if let Some(v) = response.vectors.iter().find(|v| v.len() != response.dim) {
            return Err(BackendError::Protocol(format!(
                "vector of length {} in a batch declared dim {}",
                v.len(),
                response.dim
            )));
        }
        match self
            .dim
            .compare_exchange(0, response.dim, Ordering::AcqRel, Ordering::Acquire)
        {
            Ok(_) => {}
            Err(known) if known == response.dim => {}
            Err(known) => {
                return Err(BackendError::Protocol(format!(
                    "embedder dimension changed from {known} to {}",
                    response.dim
                )))
            }
        }
        response.vectors.into_iter().map(EmbeddingVector::new).collect()
    }
}

#[derive(Debug, Clone)]
pub struct RemoteGenerator(pub RemoteClient);

#[async_trait]
impl Generator for RemoteGenerator {
    async fn generate(&self, prompt: &str, max_new_tokens: u32) -> Result<String, BackendError> {
        check_non_empty("prompt", prompt)?;
        if max_new_tokens == 0 {
            return Err(BackendError::Contract("max_new_tokens must be positive".into()));
        }
        let request = wire::GenerateRequest {
            prompt: prompt.to_string(),
            max_new_tokens,
        };
        let response: wire::GenerateResponse = self.0.call(Capability::Generate, &request).await?;
        Ok(response.text)
    }
}

#[derive(Debug, Clone)]
pub struct RemoteGrounder(pub RemoteClient);

#[async_trait]
impl Grounder for RemoteGrounder {
    async fn ground(&self, image: &ImageData, phrase: &str) -> Result<Grounding, BackendError> {
        check_non_empty("phrase", phrase)?;
        let request = wire::GroundRequest {
            image_b64: wire::encode_image(&image.bytes),
            phrase: phrase.to_string(),
        };
        let response: wire::GroundResponse = self.0.call(Capability::Ground, &request).await?;
        if !(0.0..=1.0).contains(&response.score) {
            return Err(BackendError::Protocol(format!(
                "grounding score {} outside [0, 1]",
                response.score
            )));
        }
        Ok(Grounding {
            present: response.present,
            score: response.score,
        })
    }
}

#[derive(Debug, Clone)]
pub struct RemoteQuestionGenerator(pub RemoteClient);

#[async_trait]
impl QuestionGenerator for RemoteQuestionGenerator {
    async fn generate_question(
        &self,
        context: &str,
        answer: &str,
    ) -> Result<String, BackendError> {
        check_non_empty("context", context)?;
        check_non_empty("answer", answer)?;
        let request = wire::GenqRequest {
            context: context.to_string(),
            answer: answer.to_string(),
        };
        let response: wire::GenqResponse = self.0.call(Capability::Genq, &request).await?;
        if !response.question.contains('?') {
            return Err(BackendError::Protocol(format!(
                "generated question `{}` has no question mark",
                response.question
            )));
        }
        Ok(response.question)
    }
}
