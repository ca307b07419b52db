//! Transport adapters: a JSON chat-completion HTTP client and scripted
//! `mock:` responders.
//!
//! Mock endpoint grammar: `mock:echo`, `mock:fail`, `mock:fail-n(N)`,
//! `mock:delay(SECS)`, `mock:throttle`.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};

use crate::dcci::{ChatMessage, PromptEnvelope};

#[derive(Debug, thiserror::Error, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum ProviderError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("timed out")]
    Timeout,
    #[error("throttled by provider")]
    Throttled,
    #[error("bad response: {0}")]
    BadResponse(String),
}

impl ProviderError {
    /// Errors that make the router move on to the next provider.
    pub fn triggers_failover(&self) -> bool {
        !matches!(self, ProviderError::BadResponse(_))
    }
}

#[async_trait]
pub trait ProviderClient: Send + Sync {
    async fn complete(&self, envelope: &PromptEnvelope, max_output_tokens: u64) -> Result<String, ProviderError>;
}

/// Prefix of every echo response.
pub const ECHO_PREFIX: &str = "[echo]\n";

#[derive(Debug)]
pub enum MockScript {
    Echo,
    Fail,
    FailN(AtomicU64),
    Delay(Duration),
    Throttle,
}

#[derive(Debug)]
pub struct MockResponder {
    script: MockScript,
}

impl MockResponder {
    pub fn parse(endpoint: &str) -> Result<Self, String> {
        let spec = endpoint
            .strip_prefix("mock:")
            .ok_or_else(|| format!("{endpoint:?} is not a mock: endpoint"))?;
        let (name, arg) = match spec.split_once('(') {
            Some((name, rest)) => {
                let arg = rest
                    .strip_suffix(')')
                    .ok_or_else(|| format!("unterminated argument in {endpoint:?}"))?;
                let n: u64 = arg
                    .trim()
                    .parse()
                    .map_err(|_| format!("argument of {endpoint:?} must be a non-negative integer"))?;
                (name, Some(n))
            }
            None => (spec, None),
        };
        let script = match (name, arg) {
            ("echo", None) => MockScript::Echo,
            ("fail", None) => MockScript::Fail,
            ("fail-n", Some(n)) => MockScript::FailN(AtomicU64::new(n)),
            ("delay", Some(secs)) => MockScript::Delay(Duration::from_secs(secs)),
            ("throttle", None) => MockScript::Throttle,
            _ => return Err(format!("unknown mock script {endpoint:?}")),
        };
        Ok(Self { script })
    }

    pub fn echo(envelope: &PromptEnvelope) -> String {
        format!("{ECHO_PREFIX}{}", envelope.rendered())
    }
}

#[async_trait]
impl ProviderClient for MockResponder {
    async fn complete(&self, envelope: &PromptEnvelope, _max_output_tokens: u64) -> Result<String, ProviderError> {
        match &self.script {
            MockScript::Echo => Ok(Self::echo(envelope)),
            MockScript::Fail => Err(ProviderError::Transport("scripted failure".into())),
            MockScript::FailN(left) => {
                let failed = left
                    .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |n| n.checked_sub(1))
                    .is_ok();
                if failed {
                    Err(ProviderError::Transport("scripted failure".into()))
                } else {
                    Ok(Self::echo(envelope))
                }
            }
            MockScript::Delay(d) => {
                tokio::time::sleep(*d).await;
                Ok(Self::echo(envelope))
            }
            MockScript::Throttle => Err(ProviderError::Throttled),
        }
    }
}

/// Client for an OpenAI-style `POST {endpoint}` chat-completion contract:
/// request `{"model", "messages": [{"role","content"}], "max_tokens"}`,
/// response `{"choices": [{"message": {"content": "..."}}]}`.
pub struct HttpChatClient {
    http: reqwest::Client,
    endpoint: String,
    model: String,
    api_key: Option<String>,
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: Vec<ChatMessage>,
    max_tokens: u64,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    message: ChoiceMessage,
}

#[derive(Deserialize)]
struct ChoiceMessage {
    content: Option<String>,
}

impl HttpChatClient {
    pub fn new(endpoint: &str, model: Option<&str>, api_key: Option<String>) -> Self {
        Self {
            http: reqwest::Client::new(),
            endpoint: endpoint.to_string(),
            model: model.unwrap_or("default").to_string(),
            api_key,
        }
    }
}

#[async_trait]
impl ProviderClient for HttpChatClient {
    async fn complete(&self, envelope: &PromptEnvelope, max_output_tokens: u64) -> Result<String, ProviderError> {
        let body = ChatRequest {
            model: &self.model,
            messages: envelope.messages(),
            max_tokens: max_output_tokens,
        };
        let mut req = self.http.post(&self.endpoint).json(&body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().await.map_err(|e| {
            if e.is_timeout() {
                ProviderError::Timeout
            } else {
                ProviderError::Transport(e.to_string())
            }
        })?;
        let status = resp.status();
        if status == reqwest::StatusCode::TOO_MANY_REQUESTS {
            return Err(ProviderError::Throttled);
        }
        if status.is_server_error() {
            return Err(ProviderError::Transport(format!("status {status}")));
        }
        if !status.is_success() {
            return Err(ProviderError::BadResponse(format!("status {status}")));
        }
        let parsed: ChatResponse = resp
            .json()
            .await
            .map_err(|e| ProviderError::BadResponse(e.to_string()))?;
        parsed
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| ProviderError::BadResponse("no choices in response".into()))
    }
}

/// Build the client for an endpoint string.
pub fn client_for(endpoint: &str, model: Option<&str>, api_key: Option<String>) -> Result<Arc<dyn ProviderClient>, String> {
    if endpoint.starts_with("mock:") {
        Ok(Arc::new(MockResponder::parse(endpoint)?))
    } else if endpoint.starts_with("http://") || endpoint.starts_with("https://") {
        Ok(Arc::new(HttpChatClient::new(endpoint, model, api_key)))
    } else {
        Err(format!("unsupported endpoint {endpoint:?}"))
    }
}

/// One call with a deadline: the transport adapter as the router uses it.
pub async fn provider_client_complete(
    client: &dyn ProviderClient,
    envelope: &PromptEnvelope,
    max_output_tokens: u64,
    timeout: Duration,
) -> Result<String, ProviderError> {
    match tokio::time::timeout(timeout, client.complete(envelope, max_output_tokens)).await {
        Ok(result) => result,
        Err(_) => Err(ProviderError::Timeout),
    }
}
