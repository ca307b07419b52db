//! Grounded prompt assembly.
//!
//! Templates are plain text with the placeholders `{directive}`,
//! `{display_name}`, `{context}` and `{query}`. Everything before
//! `{context}` is the system block; `{context}` must precede `{query}`.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::retrieve::RetrievedContext;
use super::tokens::{fit_with, Tokenizer, TokenBudget, WordRatioTokenizer};
use super::DcciError;

/// Grounding and anti-skepticism instruction placed in every system block.
pub const VERIFICATION_DIRECTIVE: &str = "Answer only from the provided content when it covers the question. \
If the user expresses doubt about an answer, re-check the provided content and keep your answer unless the user gives new supporting information; change it only when that information justifies it. \
If the provided content does not address the question, answer from your general knowledge and say that the answer does not come from the course content.";

/// Context block used when retrieval produced nothing.
pub const NO_CONTENT_SENTENCE: &str = "No course content is available for this question.";

pub const TEMPLATE_SET_VERSION: &str = "v1";

const BUILTIN_TEMPLATES: &[(&str, &str)] = &[
    ("course_content", include_str!("../../templates/v1/course_content.txt")),
    ("weekly_topic", include_str!("../../templates/v1/weekly_topic.txt")),
    ("web_search", include_str!("../../templates/v1/web_search.txt")),
];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    id: String,
    head: String,
    between: String,
    tail: String,
}

impl PromptTemplate {
    pub fn parse(id: &str, source: &str) -> Result<Self, DcciError> {
        let err = |msg: &str| DcciError::TemplateError(format!("{id}: {msg}"));
        for placeholder in ["{context}", "{query}"] {
            if source.matches(placeholder).count() != 1 {
                return Err(err(&format!("{placeholder} must appear exactly once")));
            }
        }
        let (head, rest) = source.split_once("{context}").expect("checked above");
        let Some((between, tail)) = rest.split_once("{query}") else {
            return Err(err("{context} must come before {query}"));
        };
        if !head.contains("{directive}") {
            return Err(err("{directive} must appear before {context}"));
        }
        if !head.contains("{display_name}") {
            return Err(err("{display_name} must appear before {context}"));
        }
        Ok(Self {
            id: id.to_string(),
            head: head.to_string(),
            between: between.to_string(),
            tail: tail.trim_end().to_string(),
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }
}

#[derive(Debug, Clone)]
pub struct TemplateSet {
    templates: HashMap<String, PromptTemplate>,
}

impl TemplateSet {
    pub fn builtin() -> Self {
        let templates = BUILTIN_TEMPLATES
            .iter()
            .map(|(id, src)| {
                let t = PromptTemplate::parse(id, src).expect("builtin template is valid");
                (id.to_string(), t)
            })
            .collect();
        Self { templates }
    }

    /// Load every `*.txt` in `dir`, keyed by file stem, on top of the builtins.
    pub fn load_dir(dir: &Path) -> Result<Self, DcciError> {
        let mut set = Self::builtin();
        let entries = std::fs::read_dir(dir)
            .map_err(|e| DcciError::TemplateError(format!("{}: {e}", dir.display())))?;
        for entry in entries {
            let path = entry
                .map_err(|e| DcciError::TemplateError(e.to_string()))?
                .path();
            if path.extension().and_then(|e| e.to_str()) != Some("txt") {
                continue;
            }
            let Some(id) = path.file_stem().and_then(|s| s.to_str()) else {
                continue;
            };
            let src = std::fs::read_to_string(&path)
                .map_err(|e| DcciError::TemplateError(format!("{}: {e}", path.display())))?;
            set.templates.insert(id.to_string(), PromptTemplate::parse(id, &src)?);
        }
        Ok(set)
    }

    pub fn get(&self, id: &str) -> Result<&PromptTemplate, DcciError> {
        self.templates
            .get(id)
            .ok_or_else(|| DcciError::UnknownTemplate(id.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptEnvelope {
    pub system_block: String,
    pub context_block: String,
    /// Template text between the context and the query.
    pub query_heading: String,
    pub user_block: String,
    pub trailer: String,
    pub metadata: BTreeMap<String, String>,
    pub total_estimated_tokens: u64,
    pub context_truncated: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

impl PromptEnvelope {
    /// The full model input as one string; this is what token accounting
    /// measures.
    pub fn rendered(&self) -> String {
        format!(
            "{}{}{}{}{}",
            self.system_block, self.context_block, self.query_heading, self.user_block, self.trailer
        )
    }

    /// Chat-completion form: system directives and context, then the query.
    pub fn messages(&self) -> Vec<ChatMessage> {
        vec![
            ChatMessage {
                role: "system".into(),
                content: format!("{}{}", self.system_block, self.context_block),
            },
            ChatMessage {
                role: "user".into(),
                content: format!("{}{}{}", self.query_heading.trim_start(), self.user_block, self.trailer),
            },
        ]
    }

    pub fn display_name(&self) -> Option<&str> {
        self.metadata.get("display_name").map(String::as_str)
    }
}

pub fn assemble_prompt(
    ctx: Option<&RetrievedContext>,
    query: &str,
    display_name: &str,
    budget: &TokenBudget,
    template: &PromptTemplate,
) -> Result<PromptEnvelope, DcciError> {
    assemble_prompt_with(&WordRatioTokenizer, ctx, query, display_name, budget, template)
}

pub fn assemble_prompt_with(
    tokenizer: &dyn Tokenizer,
    ctx: Option<&RetrievedContext>,
    query: &str,
    display_name: &str,
    budget: &TokenBudget,
    template: &PromptTemplate,
) -> Result<PromptEnvelope, DcciError> {
    if query.trim().is_empty() {
        return Err(DcciError::EmptyQuery);
    }
    let fill = |s: &str| {
        s.replace("{directive}", VERIFICATION_DIRECTIVE)
            .replace("{display_name}", display_name)
    };
    let system_block = fill(&template.head);
    let query_heading = fill(&template.between);
    let trailer = fill(&template.tail);

    let source_text = ctx
        .filter(|c| !c.is_empty())
        .map(|c| c.text.as_str())
        .unwrap_or(NO_CONTENT_SENTENCE);

    let limit = budget.prompt_limit();
    let frame = format!("{system_block}{query_heading}{query}{trailer}");
    let overhead = tokenizer.count(&frame);
    let fitted_budget = TokenBudget::with_overhead(budget.window_tokens, budget.reserved_output, overhead)?;
    let mut available = fitted_budget.available_for_context();

    loop {
        let fitted = fit_with(tokenizer, source_text, available)?;
        if fitted.truncated && ctx.is_none_or(|c| c.is_empty()) {
            return Err(DcciError::BudgetTooSmall {
                needed: tokenizer.count(NO_CONTENT_SENTENCE),
                available,
            });
        }
        let mut envelope = PromptEnvelope {
            system_block: system_block.clone(),
            context_block: fitted.text,
            query_heading: query_heading.clone(),
            user_block: query.to_string(),
            trailer: trailer.clone(),
            metadata: BTreeMap::new(),
            total_estimated_tokens: 0,
            context_truncated: fitted.truncated,
        };
        let total = tokenizer.count(&envelope.rendered());
        if total > limit {
            // Tokenizers that are not subadditive across the join points can
            // overshoot; shrink and retry.
            let excess = total - limit;
            if available <= excess {
                return Err(DcciError::BudgetTooSmall { needed: total, available: limit });
            }
            available -= excess;
            continue;
        }
        envelope.total_estimated_tokens = total;
        envelope.metadata.insert("display_name".into(), display_name.to_string());
        envelope.metadata.insert("template_id".into(), template.id().to_string());
        envelope.metadata.insert("template_set".into(), TEMPLATE_SET_VERSION.to_string());
        if let Some(c) = ctx {
            envelope.metadata.insert("kb_id".into(), c.kb_id.clone());
            envelope.metadata.insert("source_label".into(), c.source_label.clone());
        }
        return Ok(envelope);
    }
}
