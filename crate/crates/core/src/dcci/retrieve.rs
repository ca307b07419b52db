//! Per-knowledge-base context retrieval with an optional TTL cache.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use chrono::{DateTime, Duration, Utc};
use serde::{Deserialize, Serialize};

use super::curriculum::CurriculumDocument;
use super::knowledge::{KnowledgeBaseConfig, SourceKind};
use super::tokens::{estimate_tokens, TRUNCATION_MARKER};
use super::DcciError;
use crate::lms::{PageContent, PageSource};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetrievedContext {
    pub kb_id: String,
    pub text: String,
    pub source_label: String,
    pub fetched_at: DateTime<Utc>,
    pub estimated_tokens: u64,
    pub truncated: bool,
}

impl RetrievedContext {
    pub fn new(kb_id: &str, text: String, source_label: String, fetched_at: DateTime<Utc>) -> Self {
        Self {
            kb_id: kb_id.to_string(),
            estimated_tokens: estimate_tokens(&text),
            text,
            source_label,
            fetched_at,
            truncated: false,
        }
    }

    pub fn empty(kb_id: &str, source_label: &str, fetched_at: DateTime<Utc>) -> Self {
        Self::new(kb_id, String::new(), source_label.to_string(), fetched_at)
    }

    pub fn is_empty(&self) -> bool {
        self.text.trim().is_empty()
    }

    pub fn check_invariants(&self) -> bool {
        self.estimated_tokens == estimate_tokens(&self.text)
            && (!self.truncated || self.text.ends_with(TRUNCATION_MARKER.trim_start()))
    }
}

#[derive(Clone)]
struct CachedPage {
    page: PageContent,
    fetched_at: DateTime<Utc>,
}

type Slot = Arc<tokio::sync::Mutex<Option<CachedPage>>>;
/// Resolves LMS-backed knowledge bases to context text.
///
/// Cached pages are keyed by `kb_id`; each key has its own async lock so at
/// most one fetch per knowledge base is in flight while readers of other
/// bases proceed.
pub struct ContextRetriever {
    source: Arc<dyn PageSource>,
    slots: Mutex<HashMap<String, Slot>>,
}

impl ContextRetriever {
    pub fn new(source: Arc<dyn PageSource>) -> Self {
        Self {
            source,
            slots: Mutex::new(HashMap::new()),
        }
    }

    pub async fn retrieve_context(
        &self,
        kb: &KnowledgeBaseConfig,
        now: DateTime<Utc>,
    ) -> Result<RetrievedContext, DcciError> {
        if kb.source_kind == SourceKind::WebSearch {
            return Err(DcciError::WrongDispatch(kb.kb_id.clone()));
        }
        let page = self.page_for(kb, now).await?;

        match kb.source_kind {
            SourceKind::LmsPage => Ok(RetrievedContext::new(
                &kb.kb_id,
                page.body.clone(),
                format!("LMS page {} (updated {})", page.page, page.updated_at.to_rfc3339()),
                now,
            )),
            SourceKind::CurriculumNavigator => {
                let doc = CurriculumDocument::parse(&page.body)?;
                let week = doc.active_week(now.date_naive())?;
                Ok(RetrievedContext::new(
                    &kb.kb_id,
                    week.to_context_text(),
                    format!("Curriculum Navigator {}, week {}", page.page, week.week_index),
                    now,
                ))
            }
            SourceKind::WebSearch => unreachable!("handled above"),
        }
    }

    async fn page_for(&self, kb: &KnowledgeBaseConfig, now: DateTime<Utc>) -> Result<PageContent, DcciError> {
        let page_ref = kb
            .page_ref
            .as_ref()
            .ok_or_else(|| DcciError::InvalidConfig(format!("{} has no page_ref", kb.kb_id)))?;

        if kb.cache_ttl == 0 {
            return self.source.fetch_page(page_ref).await.map_err(DcciError::SourceUnavailable);
        }

        let slot = {
            let mut slots = self.slots.lock().expect("retriever slot map poisoned");
            slots.entry(kb.kb_id.clone()).or_default().clone()
        };
        let mut cached = slot.lock().await;
        let ttl = Duration::seconds(i64::try_from(kb.cache_ttl).unwrap_or(i64::MAX / 2));
        if let Some(hit) = cached.as_ref() {
            if now - hit.fetched_at < ttl && hit.page.page == *page_ref {
                return Ok(hit.page.clone());
            }
        }
        let page = self
            .source
            .fetch_page(page_ref)
            .await
            .map_err(DcciError::SourceUnavailable)?;
        *cached = Some(CachedPage {
            page: page.clone(),
            fetched_at: now,
        });
        Ok(page)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::{Clock, MockClock};
    use crate::dcci::KbRegistry;
    use crate::lms::{CoursePageRef, LmsError, MockLms};

    fn setup() -> (MockClock, Arc<MockLms>, ContextRetriever, KbRegistry) {
        let clock = MockClock::at_rfc3339("2024-10-09T12:00:00Z");
        let lms = Arc::new(MockLms::new(Arc::new(clock.clone())));
        let retriever = ContextRetriever::new(lms.clone());
        (clock, lms, retriever, KbRegistry::standard("c1"))
    }

    fn curriculum() -> &'static str {
        r#"<pre>{"course":"Programming 1","weeks":[
            {"week":1,"title":"Specifications","start_date":"2024-10-01","end_date":"2024-10-07","topics":["input/output","pre- and postconditions"],"body":"Write specs."},
            {"week":2,"title":"Summation &amp; counting","start_date":"2024-10-08","end_date":"2024-10-14","topics":["summation pattern","counting pattern"],"body":"Patterns week."}]}</pre>"#
    }

    #[tokio::test]
    async fn lms_page_passes_through() {
        let (clock, lms, retriever, reg) = setup();
        lms.stub_update_page(&CoursePageRef::new("c1", "general-info").unwrap(), "Grading: 5 tests");
        let ctx = retriever.retrieve_context(reg.get("general-info").unwrap(), clock.now()).await.unwrap();
        assert_eq!(ctx.text, "Grading: 5 tests");
        assert!(!ctx.truncated);
        assert!(ctx.check_invariants());
    }

    #[tokio::test]
    async fn weekly_topic_serializes_active_week() {
        let (clock, lms, retriever, reg) = setup();
        lms.stub_update_page(&CoursePageRef::new("c1", "curriculum-navigator").unwrap(), curriculum());
        let ctx = retriever.retrieve_context(reg.get("weekly-topic").unwrap(), clock.now()).await.unwrap();
        // Containment against the fixture's week-2 fields.
        for needle in ["Summation & counting", "summation pattern", "counting pattern", "Patterns week."] {
            assert!(ctx.text.contains(needle), "missing {needle:?} in {}", ctx.text);
        }
        assert!(!ctx.text.contains("Specifications"));
    }

    #[tokio::test]
    async fn weekly_topic_outside_schedule_is_no_active_week() {
        let (clock, lms, retriever, reg) = setup();
        lms.stub_update_page(&CoursePageRef::new("c1", "curriculum-navigator").unwrap(), curriculum());
        clock.advance_secs(86_400 * 30);
        let err = retriever.retrieve_context(reg.get("weekly-topic").unwrap(), clock.now()).await.unwrap_err();
        assert!(matches!(err, DcciError::NoActiveWeek(_)));
    }

    #[tokio::test]
    async fn ttl_zero_sees_every_update() {
        let (clock, lms, retriever, reg) = setup();
        let page = CoursePageRef::new("c1", "general-info").unwrap();
        let kb = reg.get("general-info").unwrap();
        lms.stub_update_page(&page, "Deadline Oct 20");
        assert_eq!(retriever.retrieve_context(kb, clock.now()).await.unwrap().text, "Deadline Oct 20");
        lms.stub_update_page(&page, "Deadline moved");
        assert_eq!(retriever.retrieve_context(kb, clock.now()).await.unwrap().text, "Deadline moved");
    }

    #[tokio::test]
    async fn ttl_reuses_page_until_expiry() {
        let (clock, lms, retriever, reg) = setup();
        let page = CoursePageRef::new("c1", "general-info").unwrap();
        let mut kb = reg.get("general-info").unwrap().clone();
        kb.cache_ttl = 60;
        lms.stub_update_page(&page, "old");
        assert_eq!(retriever.retrieve_context(&kb, clock.now()).await.unwrap().text, "old");
        lms.stub_update_page(&page, "new");
        clock.advance_secs(30);
        assert_eq!(retriever.retrieve_context(&kb, clock.now()).await.unwrap().text, "old");
        clock.advance_secs(30);
        assert_eq!(retriever.retrieve_context(&kb, clock.now()).await.unwrap().text, "new");
    }

    #[tokio::test]
    async fn web_search_is_wrong_dispatch_and_missing_page_is_unavailable() {
        let (clock, _lms, retriever, reg) = setup();
        assert!(matches!(
            retriever.retrieve_context(reg.get("internet-wizard").unwrap(), clock.now()).await,
            Err(DcciError::WrongDispatch(_))
        ));
        assert!(matches!(
            retriever.retrieve_context(reg.get("tms-manual").unwrap(), clock.now()).await,
            Err(DcciError::SourceUnavailable(LmsError::NotFound { .. }))
        ));
    }
}
