//! The JSON configuration file shared by `run` and `build-dataset`.
//!
//! Relative paths inside the file resolve against the file's own directory.
//! Endpoint URLs can be overridden with `FLOODVQA_<CAPABILITY>_URL`; nothing
//! else is read from the environment.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use floodvqa_core::backends::config::BackendsConfig;
use floodvqa_core::builder::{BuildBackends, BuildConfig, LexiconTagger};
use floodvqa_core::context::CandidateCounts;
use floodvqa_core::pipeline::{Pipeline, PipelineConfig};
use floodvqa_core::prompt::{ExampleBank, ExampleCounts, PromptMode};
use serde::Deserialize;

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CliConfig {
    #[serde(default)]
    pub backends: BackendsConfig,
    #[serde(default)]
    pub pipeline: PipelineSection,
    /// JSON array of CoT examples; the builtin bank when absent.
    #[serde(default)]
    pub example_bank: Option<PathBuf>,
    /// Directory image paths resolve against; the manifest's directory when
    /// absent.
    #[serde(default)]
    pub image_root: Option<PathBuf>,
    #[serde(default)]
    pub build: BuildConfig,
    /// Word list for entity extraction, one entry per line; the builtin
    /// lexicon when absent.
    #[serde(default)]
    pub lexicon: Option<PathBuf>,
}

/// Pipeline settings other than the prompt mode, which comes from `--mode`.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineSection {
    pub max_new_tokens: Option<u32>,
    pub n_override: Option<usize>,
    pub concurrency_limit: Option<usize>,
    pub candidate_counts: Option<CandidateCounts>,
    pub example_counts: Option<ExampleCounts>,
}

impl PipelineSection {
    pub fn to_config(&self, mode: PromptMode) -> PipelineConfig {
        let mut c = PipelineConfig::new(mode);
        if let Some(v) = self.max_new_tokens {
            c.max_new_tokens = v;
        }
        c.n_override = self.n_override;
        if let Some(v) = self.concurrency_limit {
            c.concurrency_limit = v;
        }
        if let Some(v) = self.candidate_counts {
            c.candidate_counts = v;
        }
        if let Some(v) = self.example_counts {
            c.example_counts = v;
        }
        c
    }
}

impl CliConfig {
    pub fn parse(bytes: &[u8]) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_slice(bytes);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            anyhow::anyhow!("config error at `{path}`: {}", e.into_inner())
        })
    }

    /// Reads `path`, applies endpoint overrides from `env` and makes every
    /// path absolute relative to the config file.
    pub fn load(path: &Path, env: impl Fn(&str) -> Option<String>) -> Result<Self> {
        let bytes = std::fs::read(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut config =
            Self::parse(&bytes).with_context(|| format!("in config {}", path.display()))?;
        config.backends.apply_env(env);
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut config.example_bank, &mut config.image_root, &mut config.lexicon]
            .into_iter()
            .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(config)
    }

    pub fn example_bank(&self) -> Result<ExampleBank> {
        match &self.example_bank {
            None => Ok(ExampleBank::builtin()),
            Some(p) => {
                let bytes =
                    std::fs::read(p).with_context(|| format!("reading example bank {}", p.display()))?;
                ExampleBank::from_json(&bytes).with_context(|| format!("in example bank {}", p.display()))
            }
        }
    }

    pub fn pipeline(&self, mode: PromptMode) -> Result<Pipeline> {
        let b = &self.backends;
        Ok(Pipeline::new(
            b.captioner()?,
            b.embedder()?,
            b.generator()?,
            self.example_bank()?,
            self.pipeline.to_config(mode),
        )?)
    }

    pub fn build_backends(&self, image_dir: &Path) -> Result<BuildBackends> {
        let b = &self.backends;
        let tagger = match &self.lexicon {
            None => LexiconTagger::builtin(),
            Some(p) => LexiconTagger::from_text(
                &std::fs::read_to_string(p).with_context(|| format!("reading lexicon {}", p.display()))?,
            ),
        };
        Ok(BuildBackends {
            captioner: b.captioner()?,
            grounder: b.grounder(Some(image_dir))?,
            question_generator: b.question_generator()?,
            tagger: std::sync::Arc::new(tagger),
        })
    }
}
