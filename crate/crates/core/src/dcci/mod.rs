//! Dynamic course content integration: retrieve the designated course
//! content for a knowledge base, fit it into the model's context window and
//! structure it with the user's query.

mod curriculum;
mod knowledge;
mod prompt;
mod retrieve;
mod tokens;

use chrono::NaiveDate;

use crate::lms::LmsError;

pub use curriculum::{parse_curriculum_navigator, CurriculumDocument, CurriculumWeek};
pub use knowledge::{KbRegistry, KnowledgeBaseConfig, SourceKind};
pub use prompt::{
    assemble_prompt, assemble_prompt_with, ChatMessage, PromptEnvelope, PromptTemplate, TemplateSet,
    NO_CONTENT_SENTENCE, TEMPLATE_SET_VERSION, VERIFICATION_DIRECTIVE,
};
pub use retrieve::{ContextRetriever, RetrievedContext};
pub use tokens::{
    estimate_tokens, fit_to_budget, fit_with, without_marker, words_to_tokens, Fitted, TokenBudget, Tokenizer,
    WordRatioTokenizer, DEFAULT_RESERVED_OUTPUT, TRUNCATION_MARKER,
};

#[derive(Debug, thiserror::Error, Clone, PartialEq, Eq)]
pub enum DcciError {
    #[error("context budget too small: need {needed} tokens, have {available}")]
    BudgetTooSmall { needed: u64, available: u64 },
    #[error("invalid budget: {0}")]
    InvalidBudget(String),
    #[error("curriculum schema error at {0}")]
    SchemaError(String),
    #[error("no curriculum week covers {0}")]
    NoActiveWeek(NaiveDate),
    #[error("content source unavailable: {0}")]
    SourceUnavailable(#[source] LmsError),
    #[error("knowledge base {0:?} is served by web search, not the LMS retriever")]
    WrongDispatch(String),
    #[error("query is empty")]
    EmptyQuery,
    #[error("unknown prompt template {0:?}")]
    UnknownTemplate(String),
    #[error("template error: {0}")]
    TemplateError(String),
    #[error("invalid knowledge base configuration: {0}")]
    InvalidConfig(String),
}
