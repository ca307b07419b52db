//! Drive recorded query logs through the full chat pipeline against fixture
//! pages, the echo provider and a mock clock.
//!
//! Log format, one JSON object per line:
//!
//! ```text
//! {"user": "u1", "session": "start"}
//! {"user": "u1", "kb_id": "general-info", "query": "When is the exam?", "rating": 5}
//! {"user": "u1", "session": "end", "after_secs": 120}
//! ```
//!
//! A query from a user without an open session opens one. `after_secs`
//! advances the clock before the line is applied (default 60).

use std::collections::HashMap;
use std::path::Path;
use std::sync::Arc;

use chrono::{DateTime, Utc};
use dcci_core::analytics::{AnalyticsStore, AppendLogBackend, IdMode, MemoryBackend, StoreBackend, TimeRange};
use dcci_core::clock::{Clock, MockClock};
use dcci_core::dcci::{ContextRetriever, KbRegistry};
use dcci_core::lms::{CoursePageRef, MockLms};
use dcci_core::pipeline::{ChatPipeline, PipelineError};
use dcci_core::router::{default_registry, Router};
use dcci_core::wizard::FixtureBackend;
use serde::Deserialize;

use crate::report::{render_usage, ReportFormat};

pub const DEFAULT_START: &str = "2024-10-01T09:00:00Z";
pub const DEFAULT_STEP_SECS: i64 = 60;
pub const DEFAULT_COURSE: &str = "replay-course";

#[derive(Debug, thiserror::Error)]
pub enum ReplayError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("fixtures: {0}")]
    Fixtures(String),
    #[error("store: {0}")]
    Store(String),
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct LogLine {
    #[serde(default)]
    user: Option<String>,
    #[serde(default)]
    session: Option<SessionMark>,
    #[serde(default)]
    kb_id: Option<String>,
    #[serde(default)]
    query: Option<String>,
    #[serde(default)]
    rating: Option<i64>,
    #[serde(default)]
    after_secs: Option<i64>,
}

#[derive(Debug, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
enum SessionMark {
    Start,
    End,
}

#[derive(Debug, Clone)]
pub struct ReplayOptions {
    pub start: DateTime<Utc>,
    pub course_id: String,
    pub format: ReportFormat,
}

impl Default for ReplayOptions {
    fn default() -> Self {
        Self {
            start: DEFAULT_START.parse().expect("valid constant"),
            course_id: DEFAULT_COURSE.into(),
            format: ReportFormat::Text,
        }
    }
}

fn load_pages(mock: &MockLms, course_id: &str, dir: &Path) -> Result<usize, ReplayError> {
    let entries = std::fs::read_dir(dir).map_err(|e| ReplayError::Fixtures(format!("{}: {e}", dir.display())))?;
    let mut paths: Vec<_> = entries.filter_map(|e| e.ok().map(|e| e.path())).collect();
    paths.sort();
    let mut n = 0;
    for path in paths.iter().filter(|p| p.is_file()) {
        if path.file_name().and_then(|f| f.to_str()) == Some("search.json") {
            continue;
        }
        let Some(slug) = path.file_stem().and_then(|s| s.to_str()) else { continue };
        let body = std::fs::read_to_string(path).map_err(|e| ReplayError::Fixtures(format!("{}: {e}", path.display())))?;
        let page = CoursePageRef::new(course_id, slug).map_err(|e| ReplayError::Fixtures(e.to_string()))?;
        mock.stub_update_page(&page, &body);
        n += 1;
    }
    Ok(n)
}

/// Replays `log` and returns the rendered usage and rating report. When
/// `store_path` is set the records are also written there.
pub async fn replay(log: &str, fixtures: &Path, store_path: Option<&Path>, opts: &ReplayOptions) -> Result<String, ReplayError> {
    let clock = Arc::new(MockClock::new(opts.start));
    let mock = Arc::new(MockLms::new(clock.clone()));
    let pages_dir = if fixtures.join("pages").is_dir() { fixtures.join("pages") } else { fixtures.to_path_buf() };
    load_pages(&mock, &opts.course_id, &pages_dir)?;
    let search_path = fixtures.join("search.json");
    let search = if search_path.is_file() {
        FixtureBackend::load(&search_path).map_err(|e| ReplayError::Fixtures(e.to_string()))?
    } else {
        FixtureBackend::default()
    };

    let registry = KbRegistry::standard(&opts.course_id);
    let kbs = registry.iter().map(|kb| (kb.kb_id.clone(), kb.display_name.clone())).collect();
    let backend: Box<dyn StoreBackend> = match store_path {
        Some(p) => Box::new(AppendLogBackend::new(p)),
        None => Box::new(MemoryBackend),
    };
    let store = AnalyticsStore::open(backend, kbs)
        .map_err(|e| ReplayError::Store(e.to_string()))?
        .with_ids(IdMode::sequential());
    let store = Arc::new(store);
    let router = Router::new(default_registry(), clock.clone()).map_err(|e| ReplayError::Fixtures(e.to_string()))?;
    let pipeline = ChatPipeline::new(
        registry,
        ContextRetriever::new(mock),
        Arc::new(search),
        Arc::new(router),
        store.clone(),
        clock.clone(),
    );

    let mut open: HashMap<String, String> = HashMap::new();
    for (i, raw) in log.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| ReplayError::Parse { line, message };
        let entry: LogLine = serde_json::from_str(raw).map_err(|e| parse_err(e.to_string()))?;
        clock.advance_secs(entry.after_secs.unwrap_or(DEFAULT_STEP_SECS).max(0));
        let user = entry.user.clone().unwrap_or_else(|| "anonymous".into());
        let store_err = |e: dcci_core::analytics::AnalyticsError| parse_err(e.to_string());

        match (&entry.session, &entry.kb_id, &entry.query) {
            (Some(SessionMark::Start), None, None) => {
                if let Some(old) = open.remove(&user) {
                    store.close_session(&old, clock.now()).map_err(store_err)?;
                }
                open.insert(user.clone(), store.open_session(&user, clock.now()).map_err(store_err)?);
            }
            (Some(SessionMark::End), None, None) => {
                let id = open
                    .remove(&user)
                    .ok_or_else(|| parse_err(format!("session end for {user:?} without an open session")))?;
                store.close_session(&id, clock.now()).map_err(store_err)?;
            }
            (None, Some(kb_id), Some(query)) => {
                let session = match open.get(&user) {
                    Some(s) => s.clone(),
                    None => {
                        let s = store.open_session(&user, clock.now()).map_err(store_err)?;
                        open.insert(user.clone(), s.clone());
                        s
                    }
                };
                let reply = pipeline.chat(&session, kb_id, query, &user).await.map_err(|e| match e {
                    PipelineError::Providers { turn_id, error } => parse_err(format!("turn {turn_id}: {error}")),
                    other => parse_err(other.to_string()),
                })?;
                if let Some(r) = entry.rating {
                    store.rate_turn(&reply.turn_id, r, clock.now()).map_err(store_err)?;
                }
            }
            _ => {
                return Err(parse_err(
                    "expected either a session mark or both kb_id and query".into(),
                ))
            }
        }
    }

    let mut ids: Vec<_> = open.into_values().collect();
    ids.sort();
    for id in ids {
        store.close_session(&id, clock.now()).map_err(|e| ReplayError::Store(e.to_string()))?;
    }

    let usage = store.usage_report(TimeRange::ALL);
    let ratings = store.rating_report();
    Ok(match opts.format {
        ReportFormat::Text => format!("{}\n{}", render_usage(&usage), ratings.render_text()),
        ReportFormat::Csv => ratings.render_csv(),
    })
}
