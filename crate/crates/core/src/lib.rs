//! Caption-grounded zero-shot visual question answering for flood imagery.
//!
//! The crate is organised around the stages of the answering pipeline and
//! the tooling around it:
//!
//! - [`model`]: dataset manifest types, validation and canonical JSON.
//! - [`backends`]: contracts for the external model capabilities (caption,
//!   embed, generate, ground, question generation), their HTTP clients and
//!   deterministic mocks.
//! - [`context`]: pick the caption most similar to the question.
//! - [`prompt`]: render without-CoT, zero-shot CoT and few-shot CoT prompts.
//! - [`pipeline`]: answer one question or a whole manifest, writing a run log.
//! - [`builder`]: build a yes/no question manifest from a directory of images.
//! - [`eval`]: plausibility accuracy, Fleiss' kappa and per-type reports.

pub mod backends;
pub mod builder;
pub mod context;
pub mod eval;
pub mod model;
pub mod pipeline;
pub mod prompt;
pub mod synthetic;

pub use model::{
    AnswerRecord, DatasetManifest, ImageRecord, ImageSource, QuestionRecord, QuestionType, Split,
};
pub use prompt::PromptMode;
