//! One chat turn end to end: retrieve (LMS or web search), assemble, complete
//! with failover, record.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::analytics::{AnalyticsError, AnalyticsStore, NewTurn};
use crate::clock::SharedClock;
use crate::dcci::{
    assemble_prompt, ContextRetriever, DcciError, KbRegistry, KnowledgeBaseConfig, PromptEnvelope,
    RetrievedContext, SourceKind, TemplateSet, TokenBudget, DEFAULT_RESERVED_OUTPUT,
};
use crate::router::{CompletionRequest, CompletionResult, Router, RouterError};
use crate::wizard::{merge_results, search, SearchBackend, DEFAULT_ORGANIC_K};

/// Response text stored for a turn whose completion failed.
pub const ERROR_MARKER: &str = "[error: no provider produced a response]";
/// Provider id stored for a turn no provider answered.
pub const NO_PROVIDER: &str = "none";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatReply {
    pub turn_id: String,
    pub response_text: String,
    pub kb_id: String,
    pub fallback_used: bool,
    pub provider_id: String,
}

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("unknown knowledge base {0}")]
    UnknownKb(String),
    #[error("query is empty")]
    EmptyQuery,
    #[error("course content unavailable: {0}")]
    Source(DcciError),
    #[error("prompt assembly failed: {0}")]
    Prompt(DcciError),
    /// The turn was recorded with [`ERROR_MARKER`] as its response.
    #[error("no provider could answer: {error}")]
    Providers { turn_id: String, error: RouterError },
    #[error(transparent)]
    Store(#[from] AnalyticsError),
}

pub struct ChatPipeline {
    registry: KbRegistry,
    templates: TemplateSet,
    retriever: ContextRetriever,
    search: Arc<dyn SearchBackend>,
    router: Arc<Router>,
    store: Arc<AnalyticsStore>,
    clock: SharedClock,
    reserved_output: u64,
    organic_k: usize,
}

impl ChatPipeline {
    pub fn new(
        registry: KbRegistry,
        retriever: ContextRetriever,
        search: Arc<dyn SearchBackend>,
        router: Arc<Router>,
        store: Arc<AnalyticsStore>,
        clock: SharedClock,
    ) -> Self {
        Self {
            registry,
            templates: TemplateSet::builtin(),
            retriever,
            search,
            router,
            store,
            clock,
            reserved_output: DEFAULT_RESERVED_OUTPUT,
            organic_k: DEFAULT_ORGANIC_K,
        }
    }

    pub fn templates(mut self, templates: TemplateSet) -> Self {
        self.templates = templates;
        self
    }

    pub fn reserved_output(mut self, tokens: u64) -> Self {
        self.reserved_output = tokens;
        self
    }

    pub fn organic_k(mut self, k: usize) -> Self {
        self.organic_k = k.max(1);
        self
    }

    pub fn registry(&self) -> &KbRegistry {
        &self.registry
    }

    pub fn router(&self) -> &Arc<Router> {
        &self.router
    }

    pub fn store(&self) -> &Arc<AnalyticsStore> {
        &self.store
    }

    pub fn clock(&self) -> &SharedClock {
        &self.clock
    }

    /// Context for `kb` at the current clock time. `None` selects the
    /// no-content branch of the prompt.
    pub async fn context_for(&self, kb: &KnowledgeBaseConfig, query: &str) -> Result<Option<RetrievedContext>, PipelineError> {
        let now = self.clock.now();
        match kb.source_kind {
            SourceKind::WebSearch => match search(query, self.search.as_ref()).await {
                Ok(set) => {
                    let text = merge_results(&set, self.organic_k);
                    Ok(Some(RetrievedContext::new(&kb.kb_id, text, format!("web search for {query:?}"), now)))
                }
                Err(e) => {
                    tracing::warn!(kb = %kb.kb_id, error = %e, "search backend failed; answering without web context");
                    Ok(None)
                }
            },
            _ => match self.retriever.retrieve_context(kb, now).await {
                Ok(ctx) => Ok(Some(ctx)),
                Err(DcciError::NoActiveWeek(day)) => {
                    tracing::info!(kb = %kb.kb_id, %day, "no curriculum week is active");
                    Ok(None)
                }
                Err(e) => Err(PipelineError::Source(e)),
            },
        }
    }

    fn envelope(
        &self,
        kb: &KnowledgeBaseConfig,
        ctx: Option<&RetrievedContext>,
        query: &str,
        display_name: &str,
        window: u64,
    ) -> Result<PromptEnvelope, PipelineError> {
        let template = self.templates.get(&kb.template_id).map_err(PipelineError::Prompt)?;
        let budget = TokenBudget::new(window, self.reserved_output).map_err(PipelineError::Prompt)?;
        assemble_prompt(ctx, query, display_name, &budget, template).map_err(PipelineError::Prompt)
    }

    /// Runs one turn. The turn is persisted before this returns, including
    /// when every provider failed.
    pub async fn chat(&self, session_id: &str, kb_id: &str, query: &str, display_name: &str) -> Result<ChatReply, PipelineError> {
        let kb = self
            .registry
            .get(kb_id)
            .ok_or_else(|| PipelineError::UnknownKb(kb_id.to_string()))?;
        if query.trim().is_empty() {
            return Err(PipelineError::EmptyQuery);
        }
        if self.store.session(session_id).is_none_or(|s| !s.is_open()) {
            return Err(AnalyticsError::UnknownSession(session_id.to_string()).into());
        }
        let ctx = self.context_for(kb, query).await?;

        let started = self.clock.now();
        let outcome = self.complete(kb, ctx.as_ref(), query, display_name).await?;
        let now = self.clock.now();
        let latency_ms = |r: &CompletionResult| r.latency_ms.max((now - started).num_milliseconds().max(0) as u64);

        match outcome {
            Ok(result) => {
                let turn_id = self.store.record_turn(
                    NewTurn {
                        session_id,
                        kb_id,
                        query,
                        response: &result.text,
                        provider_id: &result.provider_id,
                        fallback_used: result.fallback_used,
                        latency_ms: latency_ms(&result),
                    },
                    now,
                )?;
                Ok(ChatReply {
                    turn_id,
                    response_text: result.text,
                    kb_id: kb_id.to_string(),
                    fallback_used: result.fallback_used,
                    provider_id: result.provider_id,
                })
            }
            Err(error) => {
                let turn_id = self.store.record_turn(
                    NewTurn {
                        session_id,
                        kb_id,
                        query,
                        response: ERROR_MARKER,
                        provider_id: NO_PROVIDER,
                        fallback_used: false,
                        latency_ms: (now - started).num_milliseconds().max(0) as u64,
                    },
                    now,
                )?;
                Err(PipelineError::Providers { turn_id, error })
            }
        }
    }

    /// Assemble for the preferred provider's window; if routing finds that
    /// only smaller windows remain, re-assemble once for the largest of them.
    async fn complete(
        &self,
        kb: &KnowledgeBaseConfig,
        ctx: Option<&RetrievedContext>,
        query: &str,
        display_name: &str,
    ) -> Result<Result<CompletionResult, RouterError>, PipelineError> {
        let Some(window) = self.router.preferred_window() else {
            return Ok(Err(RouterError::AllUnhealthy));
        };
        let preferred = self.router.preferred_provider();
        let envelope = self.envelope(kb, ctx, query, display_name, window)?;
        let request = CompletionRequest::new(envelope, self.reserved_output);
        match self.router.complete_with_failover(&request).await {
            Err(err @ RouterError::NoCapableProvider { .. }) => {
                let Some(smaller) = self.router.largest_healthy_window().filter(|w| *w < window) else {
                    return Ok(Err(err));
                };
                tracing::info!(window = smaller, "refitting prompt for a smaller context window");
                let envelope = self.envelope(kb, ctx, query, display_name, smaller)?;
                let request = CompletionRequest::new(envelope, self.reserved_output);
                // Judged against the provider preferred before the refit.
                Ok(self.router.complete_with_failover(&request).await.map(|mut r| {
                    r.fallback_used |= preferred.as_deref() != Some(r.provider_id.as_str());
                    r
                }))
            }
            other => Ok(other),
        }
    }
}
