use std::collections::{HashMap, HashSet};

use floodvqa_core::pipeline::RunLog;
use floodvqa_core::{DatasetManifest, PromptMode, QuestionType};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// What a rater sees for one answer. Carries no meta ground truth and no
/// other rater's judgment.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationTask {
    pub task_id: String,
    pub question_id: String,
    /// Relative URL of the image on this service.
    pub image_ref: String,
    pub question_text: String,
    pub qtype: QuestionType,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub options: Option<Vec<String>>,
    pub final_answer: String,
    pub reasoning: String,
    pub mode: PromptMode,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SessionState {
    pub evaluator_id: String,
    pub assigned: Vec<String>,
    pub completed: usize,
    pub remaining: usize,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CampaignError {
    #[error("rater list is empty")]
    NoRaters,
    #[error("rater `{0}` listed twice")]
    DuplicateRater(String),
    #[error("rater id is empty")]
    EmptyRater,
    #[error("run log answers `{0}`, which is not in the manifest")]
    DanglingQuestion(String),
    #[error("run log answers `{0}` more than once")]
    DuplicateAnswer(String),
}

/// Every (answered question, rater) pair, each rater's queue in run-log
/// order.
#[derive(Debug, Clone)]
pub struct Campaign {
    raters: Vec<String>,
    /// One entry per answered question; index `qi` of task `q{qi}-r{ri}`.
    questions: Vec<AnnotationTask>,
    by_task: HashMap<String, (usize, usize)>,
}

pub fn task_id(question_index: usize, rater_index: usize) -> String {
    format!("q{question_index}-r{rater_index}")
}

/// Builds a campaign from the answers in `run_log`. Failed questions have
/// nothing to rate and are skipped.
pub fn load_campaign(
    run_log: &RunLog,
    manifest: &DatasetManifest,
    raters: &[String],
) -> Result<Campaign, CampaignError> {
    if raters.is_empty() {
        return Err(CampaignError::NoRaters);
    }
    let mut seen = HashSet::new();
    for r in raters {
        if r.trim().is_empty() {
            return Err(CampaignError::EmptyRater);
        }
        if !seen.insert(r.as_str()) {
            return Err(CampaignError::DuplicateRater(r.clone()));
        }
    }

    let mut answered = HashSet::new();
    let mut questions = Vec::new();
    for answer in run_log.answers() {
        let q = manifest
            .question(&answer.question_id)
            .ok_or_else(|| CampaignError::DanglingQuestion(answer.question_id.clone()))?;
        if !answered.insert(answer.question_id.as_str()) {
            return Err(CampaignError::DuplicateAnswer(answer.question_id.clone()));
        }
        questions.push(AnnotationTask {
            task_id: String::new(),
            question_id: q.id.clone(),
            image_ref: format!("/images/{}", q.image_id),
            question_text: q.text.clone(),
            qtype: q.qtype,
            options: q.options.clone(),
            final_answer: answer.final_answer.clone(),
            reasoning: answer.reasoning.clone(),
            mode: answer.mode,
        });
    }

    let mut by_task = HashMap::new();
    for qi in 0..questions.len() {
        for ri in 0..raters.len() {
            by_task.insert(task_id(qi, ri), (qi, ri));
        }
    }
    Ok(Campaign {
        raters: raters.to_vec(),
        questions,
        by_task,
    })
}

impl Campaign {
    pub fn raters(&self) -> &[String] {
        &self.raters
    }

    pub fn rater_index(&self, evaluator_id: &str) -> Option<usize> {
        self.raters.iter().position(|r| r == evaluator_id)
    }

    pub fn n_questions(&self) -> usize {
        self.questions.len()
    }

    pub fn n_tasks(&self) -> usize {
        self.questions.len() * self.raters.len()
    }

    /// `(question index, rater index)` of a task id.
    pub fn locate(&self, task_id: &str) -> Option<(usize, usize)> {
        self.by_task.get(task_id).copied()
    }

    pub fn task(&self, question_index: usize, rater_index: usize) -> Option<AnnotationTask> {
        let template = self.questions.get(question_index)?;
        (rater_index < self.raters.len()).then(|| AnnotationTask {
            task_id: task_id(question_index, rater_index),
            ..template.clone()
        })
    }

    pub fn question_id(&self, question_index: usize) -> &str {
        &self.questions[question_index].question_id
    }

    /// Task ids assigned to one rater, in queue order.
    pub fn queue(&self, rater_index: usize) -> Vec<String> {
        (0..self.questions.len()).map(|qi| task_id(qi, rater_index)).collect()
    }

    pub fn tasks(&self) -> impl Iterator<Item = AnnotationTask> + '_ {
        (0..self.questions.len())
            .flat_map(move |qi| (0..self.raters.len()).filter_map(move |ri| self.task(qi, ri)))
    }
}
