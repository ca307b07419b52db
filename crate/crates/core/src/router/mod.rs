//! Provider routing: registry, per-provider quotas, health and failover from
//! the cloud primary to the local fallback.

mod client;
mod failover;
mod limiter;
mod profile;

pub use client::{
    client_for, provider_client_complete, HttpChatClient, MockResponder, ProviderClient, ProviderError, ECHO_PREFIX,
};
pub use failover::{
    CompletionRequest, CompletionResult, ProviderFailure, ProviderHealth, Router, TraceEvent, DEFAULT_COOLDOWN_SECS,
};
pub use limiter::{Admission, DeferReason, SlidingWindowLimiter, WINDOW_SECS};
pub use profile::{default_registry, validate_registry, Limit, ProviderProfile};

#[derive(Debug, thiserror::Error, Clone, PartialEq, Eq)]
pub enum RouterError {
    #[error("no healthy provider has a window of {needed_tokens} tokens")]
    NoCapableProvider { needed_tokens: u64, causes: Vec<ProviderFailure> },
    #[error("every provider is unhealthy")]
    AllUnhealthy,
    #[error("all providers failed: {}", format_causes(.0))]
    AllProvidersFailed(Vec<ProviderFailure>),
    #[error("provider {provider_id} returned an unusable response: {message}")]
    BadResponse { provider_id: String, message: String },
    #[error("invalid provider registry: {0}")]
    InvalidRegistry(String),
}

fn format_causes(causes: &[ProviderFailure]) -> String {
    causes
        .iter()
        .map(|c| format!("{}: {}", c.provider_id, c.cause))
        .collect::<Vec<_>>()
        .join("; ")
}
