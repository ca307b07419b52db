use std::collections::HashSet;
use std::sync::atomic::{AtomicI64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use super::client::{client_for, provider_client_complete, ProviderClient, ProviderError};
use super::limiter::{Admission, DeferReason, SlidingWindowLimiter};
use super::profile::{validate_registry, ProviderProfile};
use super::RouterError;
use crate::clock::SharedClock;
use crate::dcci::PromptEnvelope;

pub const DEFAULT_COOLDOWN_SECS: i64 = 60;

#[derive(Debug, Clone)]
pub struct CompletionRequest {
    pub envelope: PromptEnvelope,
    pub max_output_tokens: u64,
    pub request_id: String,
}

impl CompletionRequest {
    pub fn new(envelope: PromptEnvelope, max_output_tokens: u64) -> Self {
        Self {
            envelope,
            max_output_tokens,
            request_id: uuid::Uuid::new_v4().to_string(),
        }
    }

    pub fn needed_tokens(&self) -> u64 {
        self.envelope.total_estimated_tokens + self.max_output_tokens
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompletionResult {
    pub text: String,
    pub provider_id: String,
    pub latency_ms: u64,
    pub fallback_used: bool,
    pub trace: Vec<TraceEvent>,
}

/// One routing decision, in order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum TraceEvent {
    Selected { provider_id: String, needed_tokens: u64 },
    Deferred { provider_id: String, retry_after_secs: u64, reason: DeferReason },
    Failed { provider_id: String, error: ProviderError },
    Succeeded { provider_id: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProviderFailure {
    pub provider_id: String,
    pub cause: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProviderHealth {
    pub provider_id: String,
    pub healthy: bool,
    pub unhealthy_until: Option<DateTime<Utc>>,
}

struct ProviderEntry {
    profile: ProviderProfile,
    client: Arc<dyn ProviderClient>,
    /// Unix milliseconds until which the provider is in cooldown; 0 = healthy.
    unhealthy_until_ms: AtomicI64,
}

impl ProviderEntry {
    fn healthy(&self, now: DateTime<Utc>) -> bool {
        now.timestamp_millis() >= self.unhealthy_until_ms.load(Ordering::Acquire)
    }
}

/// Provider registry with quotas, health tracking and priority failover.
pub struct Router {
    entries: Vec<ProviderEntry>,
    limiter: SlidingWindowLimiter,
    clock: SharedClock,
    cooldown: chrono::Duration,
    trace_log: Mutex<Vec<TraceEvent>>,
}

impl Router {
    pub fn new(profiles: Vec<ProviderProfile>, clock: SharedClock) -> Result<Self, RouterError> {
        validate_registry(&profiles)?;
        let mut with_clients = Vec::with_capacity(profiles.len());
        for p in profiles {
            let api_key = p.api_key_env.as_deref().and_then(|var| std::env::var(var).ok());
            let client = client_for(&p.endpoint, p.model.as_deref(), api_key)
                .map_err(|e| RouterError::InvalidRegistry(format!("{}: {e}", p.provider_id)))?;
            with_clients.push((p, client));
        }
        Ok(Self::with_clients(with_clients, clock))
    }

    /// Registry with caller-supplied transports.
    pub fn with_clients(mut providers: Vec<(ProviderProfile, Arc<dyn ProviderClient>)>, clock: SharedClock) -> Self {
        providers.sort_by_key(|(p, _)| p.priority);
        let limiter = SlidingWindowLimiter::new(providers.iter().map(|(p, _)| p));
        let entries = providers
            .into_iter()
            .map(|(profile, client)| ProviderEntry {
                profile,
                client,
                unhealthy_until_ms: AtomicI64::new(0),
            })
            .collect();
        Self {
            entries,
            limiter,
            clock,
            cooldown: chrono::Duration::seconds(DEFAULT_COOLDOWN_SECS),
            trace_log: Mutex::new(Vec::new()),
        }
    }

    pub fn cooldown(mut self, cooldown: chrono::Duration) -> Self {
        self.cooldown = cooldown;
        self
    }

    pub fn profiles(&self) -> impl Iterator<Item = &ProviderProfile> {
        self.entries.iter().map(|e| &e.profile)
    }

    pub fn profile(&self, provider_id: &str) -> Option<&ProviderProfile> {
        self.entry(provider_id).map(|e| &e.profile)
    }

    fn entry(&self, provider_id: &str) -> Option<&ProviderEntry> {
        self.entries.iter().find(|e| e.profile.provider_id == provider_id)
    }

    pub fn mark_unhealthy(&self, provider_id: &str, now: DateTime<Utc>) {
        if let Some(e) = self.entry(provider_id) {
            e.unhealthy_until_ms
                .store((now + self.cooldown).timestamp_millis(), Ordering::Release);
        }
    }

    pub fn mark_healthy(&self, provider_id: &str) {
        if let Some(e) = self.entry(provider_id) {
            e.unhealthy_until_ms.store(0, Ordering::Release);
        }
    }

    pub fn health(&self) -> Vec<ProviderHealth> {
        let now = self.clock.now();
        self.entries
            .iter()
            .map(|e| {
                let healthy = e.healthy(now);
                ProviderHealth {
                    provider_id: e.profile.provider_id.clone(),
                    healthy,
                    unhealthy_until: (!healthy)
                        .then(|| DateTime::from_timestamp_millis(e.unhealthy_until_ms.load(Ordering::Acquire)))
                        .flatten(),
                }
            })
            .collect()
    }

    /// Largest window among providers that are healthy now.
    pub fn largest_healthy_window(&self) -> Option<u64> {
        let now = self.clock.now();
        self.entries.iter().filter(|e| e.healthy(now)).map(|e| e.profile.window_tokens).max()
    }

    /// Window of the provider a request would go to first.
    pub fn preferred_window(&self) -> Option<u64> {
        let now = self.clock.now();
        self.entries.iter().find(|e| e.healthy(now)).map(|e| e.profile.window_tokens)
    }

    /// Id of the provider a request would go to first.
    pub fn preferred_provider(&self) -> Option<String> {
        let now = self.clock.now();
        self.entries
            .iter()
            .find(|e| e.healthy(now))
            .map(|e| e.profile.provider_id.clone())
    }

    /// Lowest-priority-value healthy provider whose window holds `needed_tokens`.
    pub fn select_provider(&self, needed_tokens: u64) -> Result<&ProviderProfile, RouterError> {
        self.select(needed_tokens, &HashSet::new(), self.clock.now())
            .map(|e| &e.profile)
    }

    fn select(&self, needed: u64, exclude: &HashSet<String>, now: DateTime<Utc>) -> Result<&ProviderEntry, RouterError> {
        let mut any_healthy = false;
        for e in &self.entries {
            if exclude.contains(&e.profile.provider_id) || !e.healthy(now) {
                continue;
            }
            any_healthy = true;
            if e.profile.window_tokens >= needed {
                return Ok(e);
            }
        }
        if any_healthy {
            Err(RouterError::NoCapableProvider { needed_tokens: needed, causes: Vec::new() })
        } else {
            Err(RouterError::AllUnhealthy)
        }
    }

    pub fn acquire_slot(&self, provider_id: &str, tokens: u64, now: DateTime<Utc>) -> Admission {
        self.limiter.acquire_slot(provider_id, tokens, now)
    }

    /// Every trace event emitted since construction.
    pub fn trace_log(&self) -> Vec<TraceEvent> {
        self.trace_log.lock().expect("trace log poisoned").clone()
    }

    pub async fn complete_with_failover(&self, request: &CompletionRequest) -> Result<CompletionResult, RouterError> {
        let needed = request.needed_tokens();
        let dispatch_time = self.clock.now();
        let preferred = self
            .entries
            .iter()
            .find(|e| e.healthy(dispatch_time))
            .map(|e| e.profile.provider_id.clone());

        let started = Instant::now();
        let mut tried: HashSet<String> = HashSet::new();
        let mut causes: Vec<ProviderFailure> = Vec::new();
        let mut trace: Vec<TraceEvent> = Vec::new();

        let outcome = loop {
            let now = self.clock.now();
            let entry = match self.select(needed, &tried, now) {
                Ok(e) => e,
                Err(RouterError::NoCapableProvider { needed_tokens, .. }) => {
                    break Err(RouterError::NoCapableProvider {
                        needed_tokens,
                        causes: std::mem::take(&mut causes),
                    })
                }
                Err(_) => {
                    if causes.is_empty() {
                        causes = self
                            .entries
                            .iter()
                            .map(|e| ProviderFailure {
                                provider_id: e.profile.provider_id.clone(),
                                cause: "in cooldown".into(),
                            })
                            .collect();
                    }
                    break Err(RouterError::AllProvidersFailed(std::mem::take(&mut causes)));
                }
            };
            let id = entry.profile.provider_id.clone();
            tried.insert(id.clone());
            trace.push(TraceEvent::Selected { provider_id: id.clone(), needed_tokens: needed });

            if let Admission::Defer { retry_after, reason } = self.limiter.acquire_slot(&id, needed, now) {
                trace.push(TraceEvent::Deferred {
                    provider_id: id.clone(),
                    retry_after_secs: retry_after.as_secs(),
                    reason,
                });
                causes.push(ProviderFailure {
                    provider_id: id,
                    cause: format!("rate limited ({reason:?}), retry after {}s", retry_after.as_secs()),
                });
                continue;
            }

            let timeout = Duration::from_secs(entry.profile.timeout_secs);
            match provider_client_complete(entry.client.as_ref(), &request.envelope, request.max_output_tokens, timeout).await {
                Ok(text) => {
                    trace.push(TraceEvent::Succeeded { provider_id: id.clone() });
                    tracing::debug!(request_id = %request.request_id, provider = %id, "completion served");
                    break Ok(CompletionResult {
                        text,
                        fallback_used: preferred.as_deref() != Some(id.as_str()),
                        provider_id: id,
                        latency_ms: started.elapsed().as_millis() as u64,
                        trace: Vec::new(),
                    });
                }
                Err(error) => {
                    tracing::warn!(request_id = %request.request_id, provider = %id, %error, "provider failed");
                    trace.push(TraceEvent::Failed { provider_id: id.clone(), error: error.clone() });
                    if !error.triggers_failover() {
                        break Err(RouterError::BadResponse { provider_id: id, message: error.to_string() });
                    }
                    self.mark_unhealthy(&id, self.clock.now());
                    causes.push(ProviderFailure { provider_id: id, cause: error.to_string() });
                }
            }
        };

        self.trace_log.lock().expect("trace log poisoned").extend(trace.iter().cloned());
        outcome.map(|mut r| {
            r.trace = trace;
            r
        })
    }
}
