//! File-driven backend selection.
//!
//! ```json
//! {
//!   "caption":  {"kind": "mock", "seed": 7},
//!   "embed":    {"kind": "remote", "base_url": "http://10.0.0.5:8000", "timeout_ms": 5000},
//!   "generate": {"kind": "mock", "rules": [{"keyword": "safe place", "answer": "no safe place"}]}
//! }
//! ```
//!
//! `FLOODVQA_<CAPABILITY>_URL` (for example `FLOODVQA_EMBED_URL`) replaces the
//! configured backend for that capability with a remote endpoint at the
//! given URL, keeping timeout and retry settings when the entry was already
//! remote.

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::mock::{MockCaptioner, MockEmbedder, MockGenerator, MockGrounder, MockQuestionGenerator};
use super::remote::{
    RemoteCaptioner, RemoteClient, RemoteEmbedder, RemoteGenerator, RemoteGrounder,
    RemoteQuestionGenerator,
};
use super::{
    BackendEndpoint, BackendError, Captioner, Capability, Embedder, Generator, Grounder,
    QuestionGenerator,
};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendSpec<M> {
    Mock(M),
    Remote(BackendEndpoint),
}

impl<M> BackendSpec<M> {
    fn override_url(&mut self, url: String) {
        match self {
            BackendSpec::Remote(ep) => ep.base_url = url,
            BackendSpec::Mock(_) => *self = BackendSpec::Remote(BackendEndpoint::new(url)),
        }
    }
}

fn client(ep: &BackendEndpoint) -> Result<RemoteClient, BackendError> {
    RemoteClient::new(ep.clone())
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct BackendsConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub caption: Option<BackendSpec<MockCaptioner>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embed: Option<BackendSpec<MockEmbedder>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generate: Option<BackendSpec<MockGenerator>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground: Option<BackendSpec<MockGrounder>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub genq: Option<BackendSpec<MockQuestionGenerator>>,
}

pub fn env_var_name(capability: Capability) -> String {
    format!("FLOODVQA_{}_URL", capability.as_str().to_uppercase())
}

fn missing(capability: Capability) -> BackendError {
    BackendError::Contract(format!("no backend configured for `{capability}`"))
}

impl BackendsConfig {
    /// Every capability backed by its mock with default settings.
    pub fn all_mock() -> Self {
        Self {
            caption: Some(BackendSpec::Mock(MockCaptioner::default())),
            embed: Some(BackendSpec::Mock(MockEmbedder::default())),
            generate: Some(BackendSpec::Mock(MockGenerator::default())),
            ground: Some(BackendSpec::Mock(MockGrounder::default())),
            genq: Some(BackendSpec::Mock(MockQuestionGenerator::default())),
        }
    }

    /// Applies URL overrides. `lookup` is normally `std::env::var(..).ok()`.
    pub fn apply_env(&mut self, lookup: impl Fn(&str) -> Option<String>) {
        fn apply<M>(
            slot: &mut Option<BackendSpec<M>>,
            cap: Capability,
            lookup: &impl Fn(&str) -> Option<String>,
        ) {
            if let Some(url) = lookup(&env_var_name(cap)).filter(|u| !u.is_empty()) {
                match slot {
                    Some(spec) => spec.override_url(url),
                    None => *slot = Some(BackendSpec::Remote(BackendEndpoint::new(url))),
                }
            }
        }
        apply(&mut self.caption, Capability::Caption, &lookup);
        apply(&mut self.embed, Capability::Embed, &lookup);
        apply(&mut self.generate, Capability::Generate, &lookup);
        apply(&mut self.ground, Capability::Ground, &lookup);
        apply(&mut self.genq, Capability::Genq, &lookup);
    }

    pub fn captioner(&self) -> Result<Arc<dyn Captioner>, BackendError> {
        Ok(match self.caption.as_ref().ok_or_else(|| missing(Capability::Caption))? {
            BackendSpec::Mock(m) => Arc::new(m.clone()),
            BackendSpec::Remote(ep) => Arc::new(RemoteCaptioner(client(ep)?)),
        })
    }

    pub fn embedder(&self) -> Result<Arc<dyn Embedder>, BackendError> {
        Ok(match self.embed.as_ref().ok_or_else(|| missing(Capability::Embed))? {
            BackendSpec::Mock(m) => Arc::new(*m),
            BackendSpec::Remote(ep) => {
                Arc::new(RemoteEmbedder::new(client(ep)?))
            }
        })
    }

    pub fn generator(&self) -> Result<Arc<dyn Generator>, BackendError> {
        Ok(match self.generate.as_ref().ok_or_else(|| missing(Capability::Generate))? {
            BackendSpec::Mock(m) => Arc::new(m.clone()),
            BackendSpec::Remote(ep) => Arc::new(RemoteGenerator(client(ep)?)),
        })
    }

    /// The grounder; a mock grounder also picks up label sidecars in
    /// `sidecar_dir` when one is given.
    pub fn grounder(&self, sidecar_dir: Option<&Path>) -> Result<Arc<dyn Grounder>, BackendError> {
        Ok(match self.ground.as_ref().ok_or_else(|| missing(Capability::Ground))? {
            BackendSpec::Mock(m) => {
                let mut m = m.clone();
                if let Some(dir) = sidecar_dir {
                    m = m.load_sidecars(dir).map_err(|e| {
                        BackendError::Contract(format!("reading label sidecars: {e}"))
                    })?;
                }
                Arc::new(m)
            }
            BackendSpec::Remote(ep) => Arc::new(RemoteGrounder(client(ep)?)),
        })
    }

    pub fn question_generator(&self) -> Result<Arc<dyn QuestionGenerator>, BackendError> {
        Ok(match self.genq.as_ref().ok_or_else(|| missing(Capability::Genq))? {
            BackendSpec::Mock(m) => Arc::new(*m),
            BackendSpec::Remote(ep) => {
                Arc::new(RemoteQuestionGenerator(client(ep)?))
            }
        })
    }
}
