//! Caption candidates and question-similarity context selection.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{BackendError, Captioner, Embedder, EmbeddingVector, ImageData};
use crate::model::{QuestionRecord, QuestionType};
use crate::prompt::one_line;

/// Number of captions requested per question type.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateCounts {
    pub multiple_choice: usize,
    pub free_form: usize,
    pub yes_no: usize,
}

impl Default for CandidateCounts {
    fn default() -> Self {
        Self {
            multiple_choice: 5,
            free_form: 50,
            yes_no: 50,
        }
    }
}

impl CandidateCounts {
    pub fn get(&self, qtype: QuestionType) -> usize {
        match qtype {
            QuestionType::MultipleChoice => self.multiple_choice,
            QuestionType::FreeForm => self.free_form,
            QuestionType::YesNo => self.yes_no,
        }
    }
}

/// Default caption count for `qtype`.
pub fn candidate_count(qtype: QuestionType) -> usize {
    CandidateCounts::default().get(qtype)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionCandidate {
    pub text: String,
    /// Position in the captioner's output.
    pub index: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextSelection {
    pub chosen: CaptionCandidate,
    pub all_candidates: Vec<CaptionCandidate>,
    pub n_requested: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SimilarityError {
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("zero-norm embedding")]
    ZeroNorm,
}

/// Cosine similarity, clamped to [-1, 1].
pub fn cosine_similarity(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64, SimilarityError> {
    if a.dim() != b.dim() {
        return Err(SimilarityError::DimensionMismatch(a.dim(), b.dim()));
    }
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (x, y) in a.values().iter().zip(b.values()) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(SimilarityError::ZeroNorm);
    }
    Ok((dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ContextError {
    #[error("captioning failed: {0}")]
    Caption(#[source] BackendError),
    #[error("embedding failed: {0}")]
    Embed(#[source] BackendError),
    #[error("degenerate input: {0}")]
    Degenerate(String),
}

/// Trims, collapses whitespace, drops empty captions and keeps only the
/// first occurrence of each distinct text.
pub fn dedup_captions(captions: &[String]) -> Vec<CaptionCandidate> {
    let mut seen = std::collections::HashSet::new();
    captions
        .iter()
        .enumerate()
        .filter_map(|(index, raw)| {
            let text = one_line(raw);
            (!text.is_empty() && seen.insert(text.clone())).then_some(CaptionCandidate {
                text,
                index,
                score: None,
            })
        })
        .collect()
}

/// Scores each candidate against the question and picks the best. Ties go
/// to the lowest generation index.
pub fn rank_candidates(
    question: &EmbeddingVector,
    candidates: Vec<(CaptionCandidate, EmbeddingVector)>,
    n_requested: usize,
) -> Result<ContextSelection, ContextError> {
    let mut scored = Vec::with_capacity(candidates.len());
    for (mut candidate, vector) in candidates {
        let score = cosine_similarity(question, &vector).map_err(|e| {
            ContextError::Degenerate(format!("caption {}: {e}", candidate.index))
        })?;
        candidate.score = Some(score);
        scored.push(candidate);
    }
    scored.sort_by_key(|c| c.index);

    let mut best: Option<&CaptionCandidate> = None;
    for c in &scored {
        if best.is_none_or(|b| c.score > b.score) {
            best = Some(c);
        }
    }
    let chosen = best
        .cloned()
        .ok_or_else(|| ContextError::Degenerate("no caption candidates".into()))?;
    Ok(ContextSelection {
        chosen,
        all_candidates: scored,
        n_requested,
    })
}

/// Captions the image `n` times, embeds the question with every distinct
/// caption in one batch and returns the most similar caption.
pub async fn select_context(
    question: &QuestionRecord,
    image: &ImageData,
    captioner: &dyn Captioner,
    embedder: &dyn Embedder,
    n: usize,
) -> Result<ContextSelection, ContextError> {
    let captions = captioner
        .caption(image, n)
        .await
        .map_err(ContextError::Caption)?;
    let candidates = dedup_captions(&captions);
    if candidates.is_empty() {
        return Err(ContextError::Degenerate(format!(
            "all {} caption(s) are empty",
            captions.len()
        )));
    }

    let query = one_line(&question.text);
    if query.is_empty() {
        return Err(ContextError::Degenerate("question text is empty".into()));
    }
    let mut batch = Vec::with_capacity(candidates.len() + 1);
    batch.push(query);
    batch.extend(candidates.iter().map(|c| c.text.clone()));

    let mut vectors = embedder.embed(&batch).await.map_err(ContextError::Embed)?;
    if vectors.len() != batch.len() {
        return Err(ContextError::Embed(BackendError::Protocol(format!(
            "embedded {} texts, received {} vectors",
            batch.len(),
            vectors.len()
        ))));
    }
    let caption_vectors = vectors.split_off(1);
    let question_vector = vectors.pop().expect("batch holds the question");

    rank_candidates(
        &question_vector,
        candidates.into_iter().zip(caption_vectors).collect(),
        n,
    )
}
