//! Automatic yes/no question construction from a directory of images.
//!
//! Each image is captioned once, the caption's entity nouns are extracted,
//! every noun is checked against the image with the grounder, and each
//! grounded noun becomes the meta ground truth of one generated question.

use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use futures::stream::{self, StreamExt};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::mock::tokenize;
use crate::backends::{Captioner, Grounder, ImageData, QuestionGenerator};
use crate::model::{
    sha256_hex, DatasetManifest, ImageRecord, ImageSource, QuestionRecord, QuestionType, Split,
};
use crate::prompt::one_line;

const BUILTIN_LEXICON: &str = include_str!("../data/noun_lexicon.txt");

pub const IMAGE_EXTENSIONS: &[&str] = &["jpg", "jpeg", "png"];

/// Finds entity nouns in a caption.
pub trait EntityTagger: Send + Sync {
    /// Nouns in order of appearance; may contain repeats.
    fn nouns(&self, caption: &str) -> Vec<String>;
}

/// Tags tokens (and multi-token phrases) that appear in a fixed lexicon.
#[derive(Debug, Clone)]
pub struct LexiconTagger {
    entries: HashSet<Vec<String>>,
    longest: usize,
}

impl LexiconTagger {
    /// Parses one entry per line; blank lines and `#` comments are skipped.
    pub fn from_text(text: &str) -> Self {
        let entries: HashSet<Vec<String>> = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(tokenize)
            .filter(|t| !t.is_empty())
            .collect();
        let longest = entries.iter().map(Vec::len).max().unwrap_or(0);
        Self { entries, longest }
    }

    pub fn builtin() -> Self {
        Self::from_text(BUILTIN_LEXICON)
    }
}

impl EntityTagger for LexiconTagger {
    fn nouns(&self, caption: &str) -> Vec<String> {
        let tokens = tokenize(caption);
        let mut out = Vec::new();
        let mut i = 0;
        while i < tokens.len() {
            let max = self.longest.min(tokens.len() - i);
            let hit = (1..=max)
                .rev()
                .find(|&len| self.entries.contains(&tokens[i..i + len]));
            match hit {
                Some(len) => {
                    out.push(tokens[i..i + len].join(" "));
                    i += len;
                }
                None => i += 1,
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntityCandidate {
    pub noun: String,
    pub source_caption: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grounded: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_score: Option<f64>,
}

/// Ordered, case-folded, deduplicated entity candidates of `caption`.
pub fn extract_entities(caption: &str, tagger: &dyn EntityTagger) -> Vec<EntityCandidate> {
    let mut seen = HashSet::new();
    tagger
        .nouns(caption)
        .into_iter()
        .map(|n| n.to_lowercase())
        .filter(|n| !n.trim().is_empty() && seen.insert(n.clone()))
        .map(|noun| EntityCandidate {
            noun,
            source_caption: caption.to_string(),
            grounded: None,
            ground_score: None,
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BuildStage {
    LoadImage,
    Caption,
    Ground,
    GenerateQuestion,
}

impl fmt::Display for BuildStage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BuildStage::LoadImage => "load_image",
            BuildStage::Caption => "caption",
            BuildStage::Ground => "ground",
            BuildStage::GenerateQuestion => "generate_question",
        })
    }
}

/// Reason recorded for an entity the grounder did not find.
pub const NOT_GROUNDED: &str = "not grounded";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rejection {
    pub image_id: String,
    /// Absent for image-level rejections.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noun: Option<String>,
    pub stage: BuildStage,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct BuildReport {
    pub n_images_in: usize,
    pub n_entities_extracted: usize,
    pub n_entities_grounded: usize,
    pub n_questions_emitted: usize,
    pub rejections: Vec<Rejection>,
}

impl BuildReport {
    fn count(&self, stage: BuildStage) -> usize {
        self.rejections
            .iter()
            .filter(|r| r.noun.is_some() && r.stage == stage)
            .count()
    }

    /// Entity-level bookkeeping: every extracted entity was either grounded
    /// or rejected at the grounding stage, and every grounded entity was
    /// either emitted or rejected at question generation.
    pub fn conservation_holds(&self) -> bool {
        self.n_entities_extracted == self.n_entities_grounded + self.count(BuildStage::Ground)
            && self.n_entities_grounded
                == self.n_questions_emitted + self.count(BuildStage::GenerateQuestion)
            && self.n_questions_emitted <= self.n_entities_grounded
            && self.n_entities_grounded <= self.n_entities_extracted
    }

    fn absorb(&mut self, other: BuildReport) {
        self.n_images_in += other.n_images_in;
        self.n_entities_extracted += other.n_entities_extracted;
        self.n_entities_grounded += other.n_entities_grounded;
        self.n_questions_emitted += other.n_questions_emitted;
        self.rejections.extend(other.rejections);
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BuildConfig {
    #[serde(default = "BuildConfig::default_concurrency")]
    pub concurrency_limit: usize,
    #[serde(default = "BuildConfig::default_source")]
    pub source: ImageSource,
    #[serde(default = "BuildConfig::default_split")]
    pub split: Split,
}

impl BuildConfig {
    fn default_concurrency() -> usize {
        1
    }
    fn default_source() -> ImageSource {
        ImageSource::Other
    }
    fn default_split() -> Split {
        Split::Eval
    }
}

impl Default for BuildConfig {
    fn default() -> Self {
        Self {
            concurrency_limit: Self::default_concurrency(),
            source: Self::default_source(),
            split: Self::default_split(),
        }
    }
}

#[derive(Clone)]
pub struct BuildBackends {
    pub captioner: Arc<dyn Captioner>,
    pub grounder: Arc<dyn Grounder>,
    pub question_generator: Arc<dyn QuestionGenerator>,
    pub tagger: Arc<dyn EntityTagger>,
}

#[derive(Debug, Error)]
pub enum BuildError {
    #[error("cannot list {}: {source}", .dir.display())]
    ListDir {
        dir: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("no .jpg/.jpeg/.png images in {}", .0.display())]
    NoImages(PathBuf),
    #[error("concurrency_limit must be at least 1")]
    Config,
}

/// Image files directly inside `dir`, sorted by path.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>, BuildError> {
    let list_err = |source| BuildError::ListDir {
        dir: dir.to_path_buf(),
        source,
    };
    let mut paths = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(list_err)? {
        let path = entry.map_err(list_err)?.path();
        let is_image = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()));
        if is_image && path.is_file() {
            paths.push(path);
        }
    }
    paths.sort();
    Ok(paths)
}

struct ImageOutcome {
    image: Option<ImageRecord>,
    questions: Vec<QuestionRecord>,
    report: BuildReport,
}

fn image_id_of(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

async fn process_image(
    path: &Path,
    image_id: String,
    duplicate: bool,
    backends: &BuildBackends,
    config: &BuildConfig,
) -> ImageOutcome {
    let mut report = BuildReport {
        n_images_in: 1,
        ..BuildReport::default()
    };
    let image_reject = |report: &mut BuildReport, stage, reason: String| {
        report.rejections.push(Rejection {
            image_id: image_id.clone(),
            noun: None,
            stage,
            reason,
        });
    };

    if duplicate {
        image_reject(&mut report, BuildStage::LoadImage, "duplicate image id".into());
        return ImageOutcome { image: None, questions: vec![], report };
    }
    let bytes = match std::fs::read(path) {
        Ok(b) => b,
        Err(e) => {
            image_reject(&mut report, BuildStage::LoadImage, e.to_string());
            return ImageOutcome { image: None, questions: vec![], report };
        }
    };
    let file_name = path
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let record = ImageRecord {
        id: image_id.clone(),
        path: file_name,
        source: config.source,
        sha256: sha256_hex(&bytes),
        split: config.split,
    };
    let image = ImageData::new(image_id.clone(), bytes);

    let caption = match backends.captioner.caption(&image, 1).await {
        Ok(mut caps) if caps.len() == 1 => one_line(&caps.remove(0)),
        Ok(caps) => {
            image_reject(
                &mut report,
                BuildStage::Caption,
                format!("expected 1 caption, received {}", caps.len()),
            );
            return ImageOutcome { image: Some(record), questions: vec![], report };
        }
        Err(e) => {
            image_reject(&mut report, BuildStage::Caption, e.to_string());
            return ImageOutcome { image: Some(record), questions: vec![], report };
        }
    };
    if caption.is_empty() {
        return ImageOutcome { image: Some(record), questions: vec![], report };
    }

    let entities = extract_entities(&caption, &*backends.tagger);
    report.n_entities_extracted = entities.len();
    let mut questions = Vec::new();

    for mut entity in entities {
        let mut reject = |stage, reason: String| {
            report.rejections.push(Rejection {
                image_id: image_id.clone(),
                noun: Some(entity.noun.clone()),
                stage,
                reason,
            });
        };
        match backends.grounder.ground(&image, &entity.noun).await {
            Ok(g) => {
                entity.grounded = Some(g.present);
                entity.ground_score = Some(g.score);
                if !g.present {
                    reject(BuildStage::Ground, NOT_GROUNDED.to_string());
                    continue;
                }
            }
            Err(e) => {
                reject(BuildStage::Ground, e.to_string());
                continue;
            }
        }
        report.n_entities_grounded += 1;

        let question = match backends
            .question_generator
            .generate_question(&caption, &entity.noun)
            .await
        {
            Ok(q) if !one_line(&q).is_empty() => one_line(&q),
            Ok(_) => {
                reject(BuildStage::GenerateQuestion, "empty question".into());
                continue;
            }
            Err(e) => {
                reject(BuildStage::GenerateQuestion, e.to_string());
                continue;
            }
        };
        questions.push(QuestionRecord {
            id: format!("{}-q{}", image_id, questions.len() + 1),
            image_id: image_id.clone(),
            qtype: QuestionType::YesNo,
            text: question,
            options: None,
            meta_ground_truth: entity.noun,
        });
        report.n_questions_emitted += 1;
    }

    ImageOutcome {
        image: Some(record),
        questions,
        report,
    }
}

/// Builds a manifest from the images directly inside `image_dir`. Image
/// paths in the manifest are relative to `image_dir`.
pub async fn build(
    image_dir: &Path,
    backends: &BuildBackends,
    config: &BuildConfig,
) -> Result<(DatasetManifest, BuildReport), BuildError> {
    if config.concurrency_limit == 0 {
        return Err(BuildError::Config);
    }
    let paths = list_images(image_dir)?;
    if paths.is_empty() {
        return Err(BuildError::NoImages(image_dir.to_path_buf()));
    }

    let mut seen = HashSet::new();
    let jobs: Vec<(PathBuf, String, bool)> = paths
        .into_iter()
        .map(|p| {
            let id = image_id_of(&p);
            let duplicate = !seen.insert(id.clone());
            (p, id, duplicate)
        })
        .collect();

    let outcomes: Vec<ImageOutcome> = stream::iter(jobs.iter())
        .map(|(path, id, dup)| process_image(path, id.clone(), *dup, backends, config))
        .buffered(config.concurrency_limit)
        .collect()
        .await;

    let mut images = Vec::new();
    let mut questions = Vec::new();
    let mut report = BuildReport::default();
    for outcome in outcomes {
        images.extend(outcome.image);
        questions.extend(outcome.questions);
        report.absorb(outcome.report);
    }
    Ok((DatasetManifest::new(images, questions), report))
}
