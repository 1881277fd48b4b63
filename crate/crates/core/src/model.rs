//! Dataset manifest and answer record types.
//!
//! A manifest references images by relative path and SHA-256 digest and
//! carries the questions asked about them. All types are plain values; the
//! invariants are checked by [`validate_manifest`] rather than at
//! construction so that a broken manifest can still be loaded and reported
//! on in full.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::prompt::PromptMode;

/// Current on-disk manifest version.
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuestionType {
    FreeForm,
    MultipleChoice,
    YesNo,
}

impl QuestionType {
    pub const ALL: [QuestionType; 3] = [
        QuestionType::MultipleChoice,
        QuestionType::FreeForm,
        QuestionType::YesNo,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            QuestionType::FreeForm => "free_form",
            QuestionType::MultipleChoice => "multiple_choice",
            QuestionType::YesNo => "yes_no",
        }
    }

    /// Column label used in accuracy tables.
    pub fn label(self) -> &'static str {
        match self {
            QuestionType::FreeForm => "Free-form",
            QuestionType::MultipleChoice => "Multiple-choice",
            QuestionType::YesNo => "Yes-no",
        }
    }
}

impl fmt::Display for QuestionType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for QuestionType {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "free_form" => Ok(QuestionType::FreeForm),
            "multiple_choice" => Ok(QuestionType::MultipleChoice),
            "yes_no" => Ok(QuestionType::YesNo),
            other => Err(format!("unknown question type `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuestionRecord {
    pub id: String,
    pub image_id: String,
    pub qtype: QuestionType,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub options: Option<Vec<String>>,
    pub meta_ground_truth: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ImageSource {
    #[serde(rename = "crisismmd")]
    CrisisMmd,
    #[serde(rename = "floodnet")]
    FloodNet,
    #[serde(rename = "european_flood_2013")]
    EuropeanFlood2013,
    #[serde(rename = "other")]
    Other,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Eval,
    Dev,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: String,
    /// Path relative to the image root, `/`-separated.
    pub path: String,
    pub source: ImageSource,
    pub sha256: String,
    pub split: Split,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct DeclaredCounts {
    pub n_images: usize,
    pub n_questions: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct DatasetManifest {
    pub declared_counts: DeclaredCounts,
    pub images: Vec<ImageRecord>,
    pub questions: Vec<QuestionRecord>,
}

impl DatasetManifest {
    /// Builds a manifest whose declared counts match the given lists.
    pub fn new(images: Vec<ImageRecord>, questions: Vec<QuestionRecord>) -> Self {
        Self {
            declared_counts: DeclaredCounts {
                n_images: images.len(),
                n_questions: questions.len(),
            },
            images,
            questions,
        }
    }

    pub fn image(&self, id: &str) -> Option<&ImageRecord> {
        self.images.iter().find(|img| img.id == id)
    }

    pub fn question(&self, id: &str) -> Option<&QuestionRecord> {
        self.questions.iter().find(|q| q.id == id)
    }
}

/// One generated answer, as written to the run log.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerRecord {
    pub question_id: String,
    pub mode: PromptMode,
    pub context_caption: String,
    pub prompt: String,
    pub raw_generation: String,
    pub final_answer: String,
    pub reasoning: String,
}

// ---------------------------------------------------------------------------
// Validation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Rule {
    DeclaredImageCount,
    DeclaredQuestionCount,
    DuplicateImageId,
    DuplicateQuestionId,
    EmptyId,
    MissingImageRef,
    EmptyQuestionText,
    OptionsPresence,
    TooFewOptions,
    EmptyOption,
    DuplicateOption,
    MetaNotInOptions,
    MalformedSha256,
    InvalidImagePath,
    Sha256Mismatch,
}

impl Rule {
    pub fn as_str(self) -> &'static str {
        match self {
            Rule::DeclaredImageCount => "declared_image_count",
            Rule::DeclaredQuestionCount => "declared_question_count",
            Rule::DuplicateImageId => "duplicate_image_id",
            Rule::DuplicateQuestionId => "duplicate_question_id",
            Rule::EmptyId => "empty_id",
            Rule::MissingImageRef => "missing_image_ref",
            Rule::EmptyQuestionText => "empty_question_text",
            Rule::OptionsPresence => "options_presence",
            Rule::TooFewOptions => "too_few_options",
            Rule::EmptyOption => "empty_option",
            Rule::DuplicateOption => "duplicate_option",
            Rule::MetaNotInOptions => "meta_not_in_options",
            Rule::MalformedSha256 => "malformed_sha256",
            Rule::InvalidImagePath => "invalid_image_path",
            Rule::Sha256Mismatch => "sha256_mismatch",
        }
    }
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Violation {
    /// Id of the offending record, or `"manifest"` for whole-manifest rules.
    pub record_id: String,
    pub rule: Rule,
    pub detail: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {} ({})", self.record_id, self.rule, self.detail)
    }
}

fn violation(record_id: &str, rule: Rule, detail: impl Into<String>) -> Violation {
    Violation {
        record_id: record_id.to_string(),
        rule,
        detail: detail.into(),
    }
}

fn is_sha256_hex(s: &str) -> bool {
    s.len() == 64 && s.bytes().all(|b| matches!(b, b'0'..=b'9' | b'a'..=b'f'))
}

fn is_valid_relative_path(p: &str) -> bool {
    !p.is_empty()
        && !p.starts_with('/')
        && !p.contains('\\')
        && p.split('/').all(|seg| !seg.is_empty() && seg != "..")
}

/// Returns every invariant violation in `manifest`; empty means valid.
pub fn validate_manifest(manifest: &DatasetManifest) -> Vec<Violation> {
    let mut out = Vec::new();

    if manifest.declared_counts.n_images != manifest.images.len() {
        out.push(violation(
            "manifest",
            Rule::DeclaredImageCount,
            format!(
                "declared {} images, found {}",
                manifest.declared_counts.n_images,
                manifest.images.len()
            ),
        ));
    }
    if manifest.declared_counts.n_questions != manifest.questions.len() {
        out.push(violation(
            "manifest",
            Rule::DeclaredQuestionCount,
            format!(
                "declared {} questions, found {}",
                manifest.declared_counts.n_questions,
                manifest.questions.len()
            ),
        ));
    }

    let mut image_ids = HashSet::new();
    for img in &manifest.images {
        if img.id.is_empty() {
            out.push(violation(&img.id, Rule::EmptyId, "image id is empty"));
        }
        if !image_ids.insert(img.id.as_str()) {
            out.push(violation(&img.id, Rule::DuplicateImageId, "image id repeated"));
        }
        if !is_sha256_hex(&img.sha256) {
            out.push(violation(
                &img.id,
                Rule::MalformedSha256,
                "sha256 must be 64 lowercase hex characters",
            ));
        }
        if !is_valid_relative_path(&img.path) {
            out.push(violation(
                &img.id,
                Rule::InvalidImagePath,
                format!("`{}` is not a relative path", img.path),
            ));
        }
    }

    let mut question_ids = HashSet::new();
    for q in &manifest.questions {
        if q.id.is_empty() {
            out.push(violation(&q.id, Rule::EmptyId, "question id is empty"));
        }
        if !question_ids.insert(q.id.as_str()) {
            out.push(violation(&q.id, Rule::DuplicateQuestionId, "question id repeated"));
        }
        if !image_ids.contains(q.image_id.as_str()) {
            out.push(violation(
                &q.id,
                Rule::MissingImageRef,
                format!("image `{}` not in manifest", q.image_id),
            ));
        }
        if q.text.trim().is_empty() {
            out.push(violation(&q.id, Rule::EmptyQuestionText, "question text is empty"));
        }
        match (&q.options, q.qtype) {
            (Some(options), QuestionType::MultipleChoice) => {
                if options.len() < 2 {
                    out.push(violation(
                        &q.id,
                        Rule::TooFewOptions,
                        format!("{} option(s), need at least 2", options.len()),
                    ));
                }
                if options.iter().any(|o| o.is_empty()) {
                    out.push(violation(&q.id, Rule::EmptyOption, "empty option string"));
                }
                let distinct: HashSet<&str> = options.iter().map(String::as_str).collect();
                if distinct.len() != options.len() {
                    out.push(violation(&q.id, Rule::DuplicateOption, "options repeat"));
                }
                if !options.contains(&q.meta_ground_truth) {
                    out.push(violation(
                        &q.id,
                        Rule::MetaNotInOptions,
                        format!("`{}` is not one of the options", q.meta_ground_truth),
                    ));
                }
            }
            (None, QuestionType::MultipleChoice) => out.push(violation(
                &q.id,
                Rule::OptionsPresence,
                "multiple-choice question without options",
            )),
            (Some(_), qtype) => out.push(violation(
                &q.id,
                Rule::OptionsPresence,
                format!("{qtype} question must not carry options"),
            )),
            (None, _) => {}
        }
    }

    out
}

/// Hex SHA-256 of `bytes`.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Checks digests of image files that exist under `root`. Missing files are
/// not violations here; the pipeline reports them per question.
pub fn verify_image_files(manifest: &DatasetManifest, root: &Path) -> Vec<Violation> {
    manifest
        .images
        .iter()
        .filter_map(|img| {
            let bytes = std::fs::read(root.join(&img.path)).ok()?;
            let actual = sha256_hex(&bytes);
            (actual != img.sha256).then(|| {
                violation(
                    &img.id,
                    Rule::Sha256Mismatch,
                    format!("expected {}, file hashes to {actual}", img.sha256),
                )
            })
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("malformed manifest JSON at byte {offset}: {message}")]
    Parse { offset: usize, message: String },
    #[error("manifest schema error at `{path}`: {message}")]
    Schema { path: String, message: String },
    #[error("unsupported manifest version {0}")]
    Version(u32),
}

#[derive(Serialize, Deserialize)]
struct ManifestFile {
    version: u32,
    declared_counts: DeclaredCounts,
    images: Vec<ImageRecord>,
    questions: Vec<QuestionRecord>,
}

/// Byte offset of a 1-based (line, column) position reported by serde_json.
fn byte_offset(input: &[u8], line: usize, column: usize) -> usize {
    let mut offset = 0;
    for (i, l) in input.split(|&b| b == b'\n').enumerate() {
        if i + 1 == line {
            return (offset + column.saturating_sub(1)).min(input.len());
        }
        offset += l.len() + 1;
    }
    input.len()
}

pub fn parse_manifest(bytes: &[u8]) -> Result<DatasetManifest, ManifestError> {
    let mut de = serde_json::Deserializer::from_slice(bytes);
    let file: ManifestFile = match serde_path_to_error::deserialize(&mut de) {
        Ok(file) => file,
        Err(err) => {
            let path = err.path().to_string();
            let inner = err.into_inner();
            return Err(if inner.is_data() {
                ManifestError::Schema {
                    path,
                    message: inner.to_string(),
                }
            } else {
                ManifestError::Parse {
                    offset: byte_offset(bytes, inner.line(), inner.column()),
                    message: inner.to_string(),
                }
            });
        }
    };
    de.end().map_err(|e| ManifestError::Parse {
        offset: byte_offset(bytes, e.line(), e.column()),
        message: e.to_string(),
    })?;
    if file.version != MANIFEST_VERSION {
        return Err(ManifestError::Version(file.version));
    }
    Ok(DatasetManifest {
        declared_counts: file.declared_counts,
        images: file.images,
        questions: file.questions,
    })
}

/// Canonical form: declared key order, 2-space indent, LF, trailing newline.
pub fn serialize_manifest(manifest: &DatasetManifest) -> Vec<u8> {
    let file = ManifestFile {
        version: MANIFEST_VERSION,
        declared_counts: manifest.declared_counts,
        images: manifest.images.clone(),
        questions: manifest.questions.clone(),
    };
    let mut out = serde_json::to_vec_pretty(&file).expect("manifest types always serialize");
    out.push(b'\n');
    out
}

/// Index from question id to its record.
pub fn question_index(manifest: &DatasetManifest) -> HashMap<&str, &QuestionRecord> {
    manifest.questions.iter().map(|q| (q.id.as_str(), q)).collect()
}
