//! Deterministic stand-ins for every backend capability.
//!
//! Every mock is a pure function of its construction parameters and the
//! call inputs, so two runs over the same data produce identical output.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};

use super::{
    check_caption_request, check_embed_request, check_non_empty, BackendError, Captioner,
    Embedder, EmbeddingVector, Generator, Grounder, Grounding, ImageData, QuestionGenerator,
};
use crate::prompt::{ANSWER_LEAD, COT_TRIGGER};

/// 64-bit FNV-1a.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// Case-folds, drops punctuation and splits on whitespace.
pub fn tokenize(text: &str) -> Vec<String> {
    let cleaned: String = text
        .chars()
        .flat_map(char::to_lowercase)
        .filter(|c| c.is_alphanumeric() || c.is_whitespace())
        .collect();
    cleaned.split_whitespace().map(str::to_string).collect()
}

pub const DEFAULT_CAPTION_TEMPLATES: &[&str] = &[
    "a flooded street in a village with houses and water in the flooded street.",
    "a house surrounded by brown flood water.",
    "people standing on a roof above the flood water.",
    "a rescue boat carrying people along a flooded road.",
    "cars submerged in water next to a building.",
    "an aerial view of a flooded neighborhood with trees.",
    "a bridge over a swollen river after heavy rain.",
    "a man wading through knee deep water in a street.",
];

/// Captions drawn from a template bank by hashing `(seed, image id, index)`.
/// Images with scripted captions cycle through their script instead.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MockCaptioner {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_templates")]
    pub templates: Vec<String>,
    #[serde(default)]
    pub captions: BTreeMap<String, Vec<String>>,
}

fn default_templates() -> Vec<String> {
    DEFAULT_CAPTION_TEMPLATES.iter().map(|s| s.to_string()).collect()
}

impl Default for MockCaptioner {
    fn default() -> Self {
        Self::new(0)
    }
}

impl MockCaptioner {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            templates: default_templates(),
            captions: BTreeMap::new(),
        }
    }

    pub fn with_templates(mut self, templates: Vec<String>) -> Self {
        self.templates = templates;
        self
    }

    /// Fixes the captions returned for one image id.
    pub fn with_script(mut self, image_id: impl Into<String>, captions: Vec<String>) -> Self {
        self.captions.insert(image_id.into(), captions);
        self
    }

    fn caption_at(&self, image_id: &str, index: usize) -> String {
        if let Some(script) = self.captions.get(image_id).filter(|s| !s.is_empty()) {
            return script[index % script.len()].clone();
        }
        let key = format!("{}:{}:{}", self.seed, image_id, index);
        let pick = (fnv1a(key.as_bytes()) % self.templates.len() as u64) as usize;
        self.templates[pick].clone()
    }
}

#[async_trait]
impl Captioner for MockCaptioner {
    async fn caption(&self, image: &ImageData, n: usize) -> Result<Vec<String>, BackendError> {
        check_caption_request(n)?;
        if self.templates.is_empty() && !self.captions.contains_key(&image.id) {
            return Err(BackendError::Contract("mock captioner has no templates".into()));
        }
        Ok((0..n).map(|i| self.caption_at(&image.id, i)).collect())
    }
}

/// Hashed bag-of-words: each token adds 1 to bucket `fnv1a(token) % dim`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MockEmbedder {
    #[serde(default = "MockEmbedder::default_dim")]
    pub dim: usize,
}

impl Default for MockEmbedder {
    fn default() -> Self {
        Self {
            dim: Self::default_dim(),
        }
    }
}

impl MockEmbedder {
    pub const DEFAULT_DIM: usize = 64;

    fn default_dim() -> usize {
        Self::DEFAULT_DIM
    }

    pub fn new(dim: usize) -> Self {
        Self { dim }
    }

    pub fn embed_one(&self, text: &str) -> Vec<f64> {
        let mut values = vec![0.0; self.dim];
        for token in tokenize(text) {
            values[(fnv1a(token.as_bytes()) % self.dim as u64) as usize] += 1.0;
        }
        values
    }
}

#[async_trait]
impl Embedder for MockEmbedder {
    async fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, BackendError> {
        check_embed_request(texts)?;
        if self.dim == 0 {
            return Err(BackendError::Contract("mock embedder dim must be positive".into()));
        }
        texts
            .iter()
            .map(|t| EmbeddingVector::new(self.embed_one(t)))
            .collect()
    }
}

/// A scripted answer: when `keyword` appears in the target question block
/// the generator answers `answer`, explaining itself with `reasoning`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptRule {
    pub keyword: String,
    pub answer: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reasoning: Option<String>,
}

/// Reads the last prompt block and produces a canned answer. CoT prompts
/// get a reasoning sentence followed by `So the answer is <answer>.`
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct MockGenerator {
    #[serde(default)]
    pub rules: Vec<ScriptRule>,
    /// Always return an empty continuation.
    #[serde(default)]
    pub silent: bool,
}

struct TargetBlock<'a> {
    context: &'a str,
    question: &'a str,
    options: Vec<&'a str>,
}

fn parse_target(block: &str) -> TargetBlock<'_> {
    let mut target = TargetBlock {
        context: "",
        question: "",
        options: Vec::new(),
    };
    for line in block.lines() {
        if let Some(rest) = line.strip_prefix("Context: ") {
            target.context = rest;
        } else if let Some(rest) = line.strip_prefix("Question: ") {
            target.question = rest;
        } else if let Some(rest) = line.strip_prefix("- ") {
            target.options.push(rest);
        }
    }
    target
}

const YES_NO_LEADS: &[&str] = &[
    "is", "are", "was", "were", "do", "does", "did", "can", "could", "has", "have", "will",
];

impl MockGenerator {
    pub fn new(rules: Vec<ScriptRule>) -> Self {
        Self {
            rules,
            silent: false,
        }
    }

    pub fn silent() -> Self {
        Self {
            rules: Vec::new(),
            silent: true,
        }
    }

    /// The generator's reply to `prompt`, computed synchronously.
    pub fn respond(&self, prompt: &str) -> String {
        if self.silent {
            return String::new();
        }
        let block = prompt.rsplit("\n\n").next().unwrap_or(prompt);
        let target = parse_target(block);
        let context = target.context.trim_end_matches('.');
        let lowered = block.to_lowercase();
        let digest = fnv1a(block.as_bytes());

        let (answer, reasoning) = if let Some(rule) = self
            .rules
            .iter()
            .find(|r| !r.keyword.is_empty() && lowered.contains(&r.keyword.to_lowercase()))
        {
            (rule.answer.clone(), rule.reasoning.clone())
        } else if !target.options.is_empty() {
            let pick = (digest % target.options.len() as u64) as usize;
            (target.options[pick].to_string(), None)
        } else if tokenize(target.question)
            .first()
            .is_some_and(|w| YES_NO_LEADS.contains(&w.as_str()))
        {
            let answer = if digest.is_multiple_of(2) { "yes" } else { "no" };
            (answer.to_string(), None)
        } else {
            (context.to_string(), None)
        };

        if prompt.ends_with(COT_TRIGGER) {
            let reasoning = reasoning.unwrap_or_else(|| format!("The context says {context}."));
            format!("{reasoning} {ANSWER_LEAD} {answer}.")
        } else {
            answer
        }
    }
}

#[async_trait]
impl Generator for MockGenerator {
    async fn generate(&self, prompt: &str, max_new_tokens: u32) -> Result<String, BackendError> {
        check_non_empty("prompt", prompt)?;
        if max_new_tokens == 0 {
            return Err(BackendError::Contract("max_new_tokens must be positive".into()));
        }
        Ok(self.respond(prompt))
    }
}

/// Grounds a phrase by case-folded membership in the image's label set.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct MockGrounder {
    #[serde(default)]
    pub labels: BTreeMap<String, BTreeSet<String>>,
}

/// Suffix of the per-image label sidecar read by [`MockGrounder::load_sidecars`].
pub const LABELS_SIDECAR_SUFFIX: &str = ".labels.json";

impl MockGrounder {
    pub const THRESHOLD: f64 = 0.5;

    pub fn with_labels<I, S>(mut self, image_id: impl Into<String>, labels: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        self.labels
            .entry(image_id.into())
            .or_default()
            .extend(labels.into_iter().map(|l| fold(l.as_ref())));
        self
    }

    /// Adds labels from every `<stem>.labels.json` file in `dir`, keyed by
    /// stem. Each sidecar is a JSON array of strings.
    pub fn load_sidecars(mut self, dir: &Path) -> std::io::Result<Self> {
        for entry in std::fs::read_dir(dir)? {
            let path = entry?.path();
            let Some(name) = path.file_name().and_then(|n| n.to_str()) else {
                continue;
            };
            let Some(stem) = name.strip_suffix(LABELS_SIDECAR_SUFFIX) else {
                continue;
            };
            let labels: Vec<String> = serde_json::from_slice(&std::fs::read(&path)?)
                .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?;
            self = self.with_labels(stem.to_string(), labels);
        }
        Ok(self)
    }

    pub fn score(&self, image_id: &str, phrase: &str) -> f64 {
        let hit = self
            .labels
            .get(image_id)
            .is_some_and(|set| set.contains(&fold(phrase)));
        if hit {
            1.0
        } else {
            0.0
        }
    }
}

fn fold(s: &str) -> String {
    s.trim().to_lowercase()
}

#[async_trait]
impl Grounder for MockGrounder {
    async fn ground(&self, image: &ImageData, phrase: &str) -> Result<Grounding, BackendError> {
        check_non_empty("phrase", phrase)?;
        let score = self.score(&image.id, phrase);
        Ok(Grounding {
            present: score >= Self::THRESHOLD,
            score,
        })
    }
}

/// Template question generator: `Is there any <answer> in the area?`.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct MockQuestionGenerator {}

impl MockQuestionGenerator {
    pub fn question_for(answer: &str) -> String {
        format!("Is there any {} in the area?", answer.trim())
    }
}

#[async_trait]
impl QuestionGenerator for MockQuestionGenerator {
    async fn generate_question(
        &self,
        context: &str,
        answer: &str,
    ) -> Result<String, BackendError> {
        check_non_empty("context", context)?;
        check_non_empty("answer", answer)?;
        Ok(Self::question_for(answer))
    }
}
