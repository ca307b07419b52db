//! Internet Wizard retrieval: a pluggable search backend and the merge step
//! that turns a result set into a context block.

use std::collections::HashMap;
use std::path::Path;
use std::time::Duration;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use url::Url;

use crate::lms::strip_markup;

pub const DEFAULT_ORGANIC_K: usize = 3;
pub const FEATURED_LABEL: &str = "FEATURED SNIPPET:";
pub const KNOWLEDGE_GRAPH_LABEL: &str = "KNOWLEDGE GRAPH:";
pub const WEB_RESULTS_LABEL: &str = "WEB RESULTS:";

#[derive(Debug, thiserror::Error, Clone, PartialEq, Eq)]
pub enum WizardError {
    #[error("search backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error("search backend timed out")]
    Timeout,
    #[error("invalid search fixture: {0}")]
    InvalidFixture(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnowledgeGraphEntry {
    pub title: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OrganicResult {
    pub title: String,
    pub snippet: String,
    pub url: Url,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchResultSet {
    pub query: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub featured_snippet: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub knowledge_graph: Option<KnowledgeGraphEntry>,
    #[serde(default)]
    pub organic: Vec<OrganicResult>,
}

impl SearchResultSet {
    pub fn empty(query: &str) -> Self {
        Self {
            query: query.to_string(),
            ..Self::default()
        }
    }

    pub fn is_empty(&self) -> bool {
        self.featured_snippet.is_none() && self.knowledge_graph.is_none() && self.organic.is_empty()
    }

    /// Strips markup from every text field; blank strata are dropped.
    pub fn stripped(self) -> Self {
        let clean = |s: &str| strip_markup(s).trim().to_string();
        let featured_snippet = self.featured_snippet.map(|s| clean(&s)).filter(|s| !s.is_empty());
        let knowledge_graph = self
            .knowledge_graph
            .map(|kg| KnowledgeGraphEntry {
                title: clean(&kg.title),
                text: clean(&kg.text),
            })
            .filter(|kg| !kg.title.is_empty() || !kg.text.is_empty());
        let organic = self
            .organic
            .into_iter()
            .map(|o| OrganicResult {
                title: clean(&o.title),
                snippet: clean(&o.snippet),
                url: o.url,
            })
            .collect();
        Self {
            query: self.query,
            featured_snippet,
            knowledge_graph,
            organic,
        }
    }
}

/// Lowercase and collapse runs of whitespace.
pub fn normalize_query(query: &str) -> String {
    query.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

#[async_trait]
pub trait SearchBackend: Send + Sync {
    async fn search(&self, query: &str) -> Result<SearchResultSet, WizardError>;
}

pub async fn search(query: &str, backend: &dyn SearchBackend) -> Result<SearchResultSet, WizardError> {
    backend.search(query).await.map(SearchResultSet::stripped)
}

/// Read-only map from normalized query to results.
#[derive(Debug, Clone, Default)]
pub struct FixtureBackend {
    entries: HashMap<String, SearchResultSet>,
}

impl FixtureBackend {
    pub fn from_json(json: &str) -> Result<Self, WizardError> {
        let raw: HashMap<String, SearchResultSet> =
            serde_json::from_str(json).map_err(|e| WizardError::InvalidFixture(e.to_string()))?;
        Ok(Self {
            entries: raw.into_iter().map(|(k, v)| (normalize_query(&k), v)).collect(),
        })
    }

    pub fn load(path: &Path) -> Result<Self, WizardError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| WizardError::InvalidFixture(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[async_trait]
impl SearchBackend for FixtureBackend {
    async fn search(&self, query: &str) -> Result<SearchResultSet, WizardError> {
        Ok(self
            .entries
            .get(&normalize_query(query))
            .cloned()
            .map(|mut set| {
                set.query = query.to_string();
                set
            })
            .unwrap_or_else(|| SearchResultSet::empty(query)))
    }
}

/// Live backend: `GET {endpoint}?q=...` returning a `SearchResultSet` body.
/// Off unless configured.
pub struct HttpSearchBackend {
    http: reqwest::Client,
    endpoint: Url,
    timeout: Duration,
}

impl HttpSearchBackend {
    pub fn new(endpoint: Url, timeout: Duration) -> Self {
        Self {
            http: reqwest::Client::new(),
            endpoint,
            timeout,
        }
    }
}

#[async_trait]
impl SearchBackend for HttpSearchBackend {
    async fn search(&self, query: &str) -> Result<SearchResultSet, WizardError> {
        let mut url = self.endpoint.clone();
        url.query_pairs_mut().append_pair("q", query);
        let send = self.http.get(url).send();
        let resp = tokio::time::timeout(self.timeout, send)
            .await
            .map_err(|_| WizardError::Timeout)?
            .map_err(|e| WizardError::BackendUnavailable(e.without_url().to_string()))?;
        if !resp.status().is_success() {
            return Err(WizardError::BackendUnavailable(format!("status {}", resp.status())));
        }
        tokio::time::timeout(self.timeout, resp.json::<SearchResultSet>())
            .await
            .map_err(|_| WizardError::Timeout)?
            .map_err(|e| WizardError::BackendUnavailable(e.without_url().to_string()))
    }
}

/// Featured snippet, then knowledge graph, then the top `k` organic results.
pub fn merge_results(set: &SearchResultSet, k: usize) -> String {
    let mut sections = Vec::new();
    if let Some(snippet) = &set.featured_snippet {
        sections.push(format!("{FEATURED_LABEL}\n{snippet}"));
    }
    if let Some(kg) = &set.knowledge_graph {
        sections.push(format!("{KNOWLEDGE_GRAPH_LABEL}\n{}\n{}", kg.title, kg.text));
    }
    let organic: Vec<String> = set
        .organic
        .iter()
        .take(k)
        .enumerate()
        .map(|(i, o)| format!("{}. {}\n{}\n{}", i + 1, o.title, o.snippet, o.url))
        .collect();
    if !organic.is_empty() {
        sections.push(format!("{WEB_RESULTS_LABEL}\n{}", organic.join("\n\n")));
    }
    sections.join("\n\n")
}
