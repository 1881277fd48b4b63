//! Image + question to answer: caption selection, prompt rendering and
//! generation, plus dataset-wide runs that produce a JSON Lines run log.

use std::fmt;
use std::path::Path;
use std::sync::Arc;

use futures::stream::{self, StreamExt};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{BackendError, Captioner, Embedder, Generator, ImageData};
use crate::context::{select_context, CandidateCounts, ContextError, ContextSelection};
use crate::model::{sha256_hex, validate_manifest, AnswerRecord, DatasetManifest, QuestionRecord, Violation};
use crate::prompt::{ExampleBank, ExampleCounts, PromptMode, PromptRenderer};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub mode: PromptMode,
    #[serde(default = "PipelineConfig::default_max_new_tokens")]
    pub max_new_tokens: u32,
    /// Caption count used for every question type when set.
    #[serde(default)]
    pub n_override: Option<usize>,
    #[serde(default = "PipelineConfig::default_concurrency")]
    pub concurrency_limit: usize,
    #[serde(default)]
    pub candidate_counts: CandidateCounts,
    #[serde(default)]
    pub example_counts: ExampleCounts,
}

impl PipelineConfig {
    fn default_max_new_tokens() -> u32 {
        256
    }

    fn default_concurrency() -> usize {
        1
    }

    pub fn new(mode: PromptMode) -> Self {
        Self {
            mode,
            max_new_tokens: Self::default_max_new_tokens(),
            n_override: None,
            concurrency_limit: Self::default_concurrency(),
            candidate_counts: CandidateCounts::default(),
            example_counts: ExampleCounts::default(),
        }
    }

    pub fn with_concurrency(mut self, limit: usize) -> Self {
        self.concurrency_limit = limit;
        self
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.concurrency_limit == 0 {
            return Err(PipelineError::Config("concurrency_limit must be at least 1".into()));
        }
        if self.max_new_tokens == 0 {
            return Err(PipelineError::Config("max_new_tokens must be at least 1".into()));
        }
        if self.n_override == Some(0) {
            return Err(PipelineError::Config("n_override must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    LoadImage,
    Caption,
    Embed,
    Select,
    Prompt,
    Generate,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::LoadImage => "load_image",
            Stage::Caption => "caption",
            Stage::Embed => "embed",
            Stage::Select => "select",
            Stage::Prompt => "prompt",
            Stage::Generate => "generate",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A failure while answering one question, labelled with where it happened.
#[derive(Debug, Clone, PartialEq, Error)]
#[error("{stage} stage failed: {message}")]
pub struct StageError {
    pub stage: Stage,
    pub message: String,
}

impl StageError {
    fn new(stage: Stage, message: impl fmt::Display) -> Self {
        Self {
            stage,
            message: message.to_string(),
        }
    }
}

impl From<ContextError> for StageError {
    fn from(err: ContextError) -> Self {
        match err {
            ContextError::Caption(e) => StageError::new(Stage::Caption, e),
            ContextError::Embed(e) => StageError::new(Stage::Embed, e),
            ContextError::Degenerate(m) => StageError::new(Stage::Select, m),
        }
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid pipeline config: {0}")]
    Config(String),
    #[error("manifest has {} violation(s); first: {}", .0.len(), .0[0])]
    InvalidManifest(Vec<Violation>),
}

/// Splits a generation into `(final_answer, reasoning)`.
///
/// The answer follows the last case-insensitive `the answer is`; a directly
/// preceding `So` belongs to the marker. Without a marker, or with nothing
/// after it, the whole trimmed text is the answer.
pub fn extract_answer(raw: &str) -> (String, String) {
    const MARKER: &[u8] = b"the answer is";
    let bytes = raw.as_bytes();
    let found = (0..bytes.len().saturating_sub(MARKER.len() - 1))
        .rev()
        .find(|&i| bytes[i..i + MARKER.len()].eq_ignore_ascii_case(MARKER));

    let Some(pos) = found else {
        return (raw.trim().to_string(), String::new());
    };
    // The marker is ASCII, so both slice points fall on char boundaries.
    let tail = raw[pos + MARKER.len()..].trim();
    let answer = tail.strip_suffix('.').unwrap_or(tail).trim_end();
    if answer.is_empty() {
        return (raw.trim().to_string(), String::new());
    }

    let mut reasoning = raw[..pos].trim_end();
    if let Some(head) = strip_trailing_so(reasoning) {
        reasoning = head;
    }
    (answer.to_string(), reasoning.trim().to_string())
}

fn strip_trailing_so(s: &str) -> Option<&str> {
    let cut = s.len().checked_sub(2)?;
    if !s.is_char_boundary(cut) || !s[cut..].eq_ignore_ascii_case("so") {
        return None;
    }
    let head = &s[..cut];
    match head.chars().next_back() {
        None => Some(head),
        Some(c) if !c.is_alphanumeric() => Some(head),
        Some(_) => None,
    }
}

/// A failed question in the run log.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FailureRecord {
    pub question_id: String,
    pub error: String,
    pub stage: Stage,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RunLogEntry {
    Answer(AnswerRecord),
    Failure(FailureRecord),
}

impl RunLogEntry {
    pub fn question_id(&self) -> &str {
        match self {
            RunLogEntry::Answer(a) => &a.question_id,
            RunLogEntry::Failure(f) => &f.question_id,
        }
    }

    pub fn answer(&self) -> Option<&AnswerRecord> {
        match self {
            RunLogEntry::Answer(a) => Some(a),
            RunLogEntry::Failure(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct RunLog {
    pub entries: Vec<RunLogEntry>,
}

#[derive(Debug, Error)]
#[error("run log line {line}: {message}")]
pub struct RunLogParseError {
    pub line: usize,
    pub message: String,
}

impl RunLog {
    pub fn failures(&self) -> impl Iterator<Item = &FailureRecord> {
        self.entries.iter().filter_map(|e| match e {
            RunLogEntry::Failure(f) => Some(f),
            RunLogEntry::Answer(_) => None,
        })
    }

    pub fn answers(&self) -> impl Iterator<Item = &AnswerRecord> {
        self.entries.iter().filter_map(RunLogEntry::answer)
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for entry in &self.entries {
            out.push_str(&serde_json::to_string(entry).expect("run log entries serialize"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self, RunLogParseError> {
        let entries = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| {
                serde_json::from_str(l).map_err(|e| RunLogParseError {
                    line: i + 1,
                    message: e.to_string(),
                })
            })
            .collect::<Result<_, _>>()?;
        Ok(Self { entries })
    }
}

/// Answer generation over a fixed set of backends.
#[derive(Clone)]
pub struct Pipeline {
    captioner: Arc<dyn Captioner>,
    embedder: Arc<dyn Embedder>,
    generator: Arc<dyn Generator>,
    examples: ExampleBank,
    config: PipelineConfig,
}

impl fmt::Debug for Pipeline {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Pipeline").field("config", &self.config).finish_non_exhaustive()
    }
}

impl Pipeline {
    pub fn new(
        captioner: Arc<dyn Captioner>,
        embedder: Arc<dyn Embedder>,
        generator: Arc<dyn Generator>,
        examples: ExampleBank,
        config: PipelineConfig,
    ) -> Result<Self, PipelineError> {
        config.validate()?;
        Ok(Self {
            captioner,
            embedder,
            generator,
            examples,
            config,
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    fn caption_count(&self, question: &QuestionRecord) -> usize {
        self.config
            .n_override
            .unwrap_or_else(|| self.config.candidate_counts.get(question.qtype))
    }

    /// Context selection alone, exposed for inspection and tests.
    pub async fn select(
        &self,
        image: &ImageData,
        question: &QuestionRecord,
    ) -> Result<ContextSelection, StageError> {
        let n = self.caption_count(question);
        Ok(select_context(question, image, &*self.captioner, &*self.embedder, n).await?)
    }

    pub async fn answer_question(
        &self,
        image: &ImageData,
        question: &QuestionRecord,
    ) -> Result<AnswerRecord, StageError> {
        let selection = self.select(image, question).await?;
        let mode = self.config.mode;

        let examples = match mode {
            PromptMode::FewShotCot => self
                .examples
                .select(question.qtype, self.config.example_counts.get(question.qtype))
                .map_err(|e| StageError::new(Stage::Prompt, e))?,
            _ => Vec::new(),
        };
        let bundle = PromptRenderer::new(self.config.example_counts)
            .render(mode, &selection.chosen.text, question, &examples)
            .map_err(|e| StageError::new(Stage::Prompt, e))?;

        let raw = self
            .generator
            .generate(&bundle.text, self.config.max_new_tokens)
            .await
            .map_err(|e: BackendError| StageError::new(Stage::Generate, e))?;
        let (final_answer, reasoning) = extract_answer(&raw);

        Ok(AnswerRecord {
            question_id: question.id.clone(),
            mode,
            context_caption: bundle.context_caption,
            prompt: bundle.text,
            raw_generation: raw,
            final_answer,
            reasoning,
        })
    }

    /// Answers every question of `manifest`, resolving image paths under
    /// `image_root`. Up to `concurrency_limit` questions run at once; the
    /// log is always in manifest order.
    pub async fn run_dataset(
        &self,
        manifest: &DatasetManifest,
        image_root: &Path,
    ) -> Result<RunLog, PipelineError> {
        let violations = validate_manifest(manifest);
        if !violations.is_empty() {
            return Err(PipelineError::InvalidManifest(violations));
        }

        let entries = stream::iter(manifest.questions.iter())
            .map(|question| async move {
                let outcome = match load_image(manifest, image_root, &question.image_id) {
                    Ok(image) => self.answer_question(&image, question).await,
                    Err(e) => Err(e),
                };
                match outcome {
                    Ok(answer) => RunLogEntry::Answer(answer),
                    Err(e) => {
                        tracing::warn!(question = %question.id, stage = %e.stage, error = %e.message, "question failed");
                        RunLogEntry::Failure(FailureRecord {
                            question_id: question.id.clone(),
                            error: e.message,
                            stage: e.stage,
                        })
                    }
                }
            })
            .buffered(self.config.concurrency_limit)
            .collect()
            .await;

        Ok(RunLog { entries })
    }
}

/// Reads an image file and checks it against the manifest digest.
pub fn load_image(
    manifest: &DatasetManifest,
    image_root: &Path,
    image_id: &str,
) -> Result<ImageData, StageError> {
    let record = manifest
        .image(image_id)
        .ok_or_else(|| StageError::new(Stage::LoadImage, format!("unknown image `{image_id}`")))?;
    let path = image_root.join(&record.path);
    let bytes = std::fs::read(&path)
        .map_err(|e| StageError::new(Stage::LoadImage, format!("{}: {e}", path.display())))?;
    if sha256_hex(&bytes) != record.sha256 {
        return Err(StageError::new(
            Stage::LoadImage,
            format!("{}: sha256 does not match manifest", path.display()),
        ));
    }
    Ok(ImageData::new(record.id.clone(), bytes))
}
