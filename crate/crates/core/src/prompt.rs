//! Prompt rendering for the three prompting arms.
//!
//! A question block is
//!
//! ```text
//! Context: <caption>
//! Question: <question>
//! OPTIONS:            (multiple-choice only)
//! - <option>
//! Let's think step by step:   (CoT arms only)
//! ```
//!
//! Few-shot prompts put worked example blocks first, each ending with
//! `Let's think step by step: <reasoning> So the answer is <answer>.`, and
//! separate blocks with one blank line. Output uses LF only and carries no
//! trailing newline.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{QuestionRecord, QuestionType};

/// Appended to CoT prompts. ASCII apostrophe.
pub const COT_TRIGGER: &str = "Let's think step by step:";
/// Phrase that introduces the final answer in example reasoning.
pub const ANSWER_LEAD: &str = "So the answer is";
/// Separator between blocks of a few-shot prompt.
pub const BLOCK_SEPARATOR: &str = "\n\n";

const BUILTIN_EXAMPLES: &str = include_str!("../data/cot_examples.json");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptMode {
    WithoutCot,
    ZeroShotCot,
    FewShotCot,
}

impl PromptMode {
    pub const ALL: [PromptMode; 3] = [
        PromptMode::WithoutCot,
        PromptMode::ZeroShotCot,
        PromptMode::FewShotCot,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PromptMode::WithoutCot => "without_cot",
            PromptMode::ZeroShotCot => "zero_shot_cot",
            PromptMode::FewShotCot => "few_shot_cot",
        }
    }

    /// Human-readable arm name for report tables.
    pub fn label(self) -> &'static str {
        match self {
            PromptMode::WithoutCot => "w/o CoT",
            PromptMode::ZeroShotCot => "zero-shot CoT",
            PromptMode::FewShotCot => "few-shot CoT",
        }
    }

    pub fn uses_cot(self) -> bool {
        !matches!(self, PromptMode::WithoutCot)
    }
}

impl fmt::Display for PromptMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for PromptMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        PromptMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| format!("unknown prompt mode `{s}`"))
    }
}

/// Number of worked examples in a few-shot prompt, per question type.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExampleCounts {
    pub multiple_choice: usize,
    pub free_form: usize,
    pub yes_no: usize,
}

impl Default for ExampleCounts {
    fn default() -> Self {
        Self {
            multiple_choice: 3,
            free_form: 1,
            yes_no: 1,
        }
    }
}

impl ExampleCounts {
    pub fn get(&self, qtype: QuestionType) -> usize {
        match qtype {
            QuestionType::MultipleChoice => self.multiple_choice,
            QuestionType::FreeForm => self.free_form,
            QuestionType::YesNo => self.yes_no,
        }
    }
}

/// Default few-shot example count for `qtype`.
pub fn example_count(qtype: QuestionType) -> usize {
    ExampleCounts::default().get(qtype)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoTExample {
    pub context: String,
    pub question: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub options: Option<Vec<String>>,
    pub reasoning: String,
    pub answer: String,
    pub qtype: QuestionType,
}

impl CoTExample {
    fn check(&self, index: usize) -> Result<(), PromptError> {
        let bad = |why: &str| PromptError::InvalidExample {
            index,
            reason: why.to_string(),
        };
        if self.reasoning.trim().is_empty() {
            return Err(bad("reasoning is empty"));
        }
        if self.answer.trim().is_empty() {
            return Err(bad("answer is empty"));
        }
        if self.context.trim().is_empty() || self.question.trim().is_empty() {
            return Err(bad("context and question must be non-empty"));
        }
        if self.options.is_some() != (self.qtype == QuestionType::MultipleChoice) {
            return Err(bad("options must be present exactly for multiple-choice"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PromptBundle {
    pub text: String,
    pub mode: PromptMode,
    pub context_caption: String,
    pub examples_used: Vec<CoTExample>,
    pub question_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PromptError {
    #[error("context caption is empty")]
    EmptyContext,
    #[error("{mode} prompt for a {qtype} question needs {expected} example(s), got {got}")]
    WrongExampleCount {
        mode: PromptMode,
        qtype: QuestionType,
        expected: usize,
        got: usize,
    },
    #[error("example {index} is a {found} example but the question is {expected}")]
    ExampleTypeMismatch {
        index: usize,
        expected: QuestionType,
        found: QuestionType,
    },
    #[error("example {index} is invalid: {reason}")]
    InvalidExample { index: usize, reason: String },
    #[error("example bank has {available} {qtype} example(s), {needed} needed")]
    NotEnoughExamples {
        qtype: QuestionType,
        needed: usize,
        available: usize,
    },
    #[error("example bank is not valid JSON: {0}")]
    BankFormat(String),
}

/// Ordered collection of worked examples.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExampleBank {
    examples: Vec<CoTExample>,
}

impl ExampleBank {
    pub fn new(examples: Vec<CoTExample>) -> Result<Self, PromptError> {
        for (i, ex) in examples.iter().enumerate() {
            ex.check(i)?;
        }
        Ok(Self { examples })
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self, PromptError> {
        let examples: Vec<CoTExample> =
            serde_json::from_slice(bytes).map_err(|e| PromptError::BankFormat(e.to_string()))?;
        Self::new(examples)
    }

    /// The bank shipped with the crate.
    pub fn builtin() -> Self {
        Self::from_json(BUILTIN_EXAMPLES.as_bytes()).expect("builtin example bank is valid")
    }

    pub fn examples(&self) -> &[CoTExample] {
        &self.examples
    }

    /// The first `count` examples of type `qtype`, in file order.
    pub fn select(&self, qtype: QuestionType, count: usize) -> Result<Vec<CoTExample>, PromptError> {
        let picked: Vec<CoTExample> = self
            .examples
            .iter()
            .filter(|e| e.qtype == qtype)
            .take(count)
            .cloned()
            .collect();
        if picked.len() < count {
            return Err(PromptError::NotEnoughExamples {
                qtype,
                needed: count,
                available: picked.len(),
            });
        }
        Ok(picked)
    }
}

/// Collapses runs of whitespace (including newlines) to single spaces and
/// trims, so interpolated text cannot break the line structure.
pub fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn push_question_lines(out: &mut String, context: &str, question: &str, options: Option<&[String]>) {
    out.push_str("Context: ");
    out.push_str(&one_line(context));
    out.push_str("\nQuestion: ");
    out.push_str(&one_line(question));
    if let Some(options) = options {
        out.push_str("\nOPTIONS:");
        for option in options {
            out.push_str("\n- ");
            out.push_str(&one_line(option));
        }
    }
}

/// Renders one worked example block.
pub fn render_example(example: &CoTExample) -> String {
    let mut out = String::new();
    let options = match example.qtype {
        QuestionType::MultipleChoice => example.options.as_deref(),
        _ => None,
    };
    push_question_lines(&mut out, &example.context, &example.question, options);
    out.push('\n');
    out.push_str(COT_TRIGGER);
    out.push(' ');
    out.push_str(&one_line(&example.reasoning));
    out.push(' ');
    out.push_str(ANSWER_LEAD);
    out.push(' ');
    out.push_str(&one_line(&example.answer));
    out.push('.');
    out
}

/// Renders prompts with configurable few-shot example counts.
#[derive(Debug, Clone, Copy, Default)]
pub struct PromptRenderer {
    pub counts: ExampleCounts,
}

impl PromptRenderer {
    pub fn new(counts: ExampleCounts) -> Self {
        Self { counts }
    }

    pub fn render(
        &self,
        mode: PromptMode,
        context: &str,
        question: &QuestionRecord,
        examples: &[CoTExample],
    ) -> Result<PromptBundle, PromptError> {
        if context.trim().is_empty() {
            return Err(PromptError::EmptyContext);
        }
        let expected = match mode {
            PromptMode::FewShotCot => self.counts.get(question.qtype),
            _ => 0,
        };
        if examples.len() != expected {
            return Err(PromptError::WrongExampleCount {
                mode,
                qtype: question.qtype,
                expected,
                got: examples.len(),
            });
        }
        for (index, ex) in examples.iter().enumerate() {
            if ex.qtype != question.qtype {
                return Err(PromptError::ExampleTypeMismatch {
                    index,
                    expected: question.qtype,
                    found: ex.qtype,
                });
            }
            ex.check(index)?;
        }

        let mut text = String::new();
        for ex in examples {
            text.push_str(&render_example(ex));
            text.push_str(BLOCK_SEPARATOR);
        }
        let options = match question.qtype {
            QuestionType::MultipleChoice => question.options.as_deref(),
            _ => None,
        };
        push_question_lines(&mut text, context, &question.text, options);
        if mode.uses_cot() {
            text.push('\n');
            text.push_str(COT_TRIGGER);
        }

        Ok(PromptBundle {
            text,
            mode,
            context_caption: one_line(context),
            examples_used: examples.to_vec(),
            question_id: question.id.clone(),
        })
    }
}

/// Renders with the default example counts.
pub fn render_prompt(
    mode: PromptMode,
    context: &str,
    question: &QuestionRecord,
    examples: &[CoTExample],
) -> Result<PromptBundle, PromptError> {
    PromptRenderer::default().render(mode, context, question, examples)
}
