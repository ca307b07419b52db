//! In-process stand-in for a Canvas-style LMS. Serves the same retrieval path
//! as the real platform plus a `POST /mock/pages` control surface.

use std::collections::HashMap;
use std::sync::{Arc, RwLock};

use async_trait::async_trait;
use axum::extract::{Path, State};
use axum::http::{HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::{DateTime, Duration, Utc};
use serde::{Deserialize, Serialize};

use super::{CoursePageRef, LmsError, PageContent, PageSource, Secret};
use crate::clock::SharedClock;

#[derive(Debug, Clone)]
struct StoredPage {
    title: String,
    raw_body: String,
    updated_at: DateTime<Utc>,
}

/// Acknowledgment returned by [`MockLms::stub_update_page`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MockPageUpdate {
    pub course_id: String,
    pub page_slug: String,
    pub updated_at: DateTime<Utc>,
    pub created: bool,
}

pub struct MockLms {
    pages: RwLock<HashMap<CoursePageRef, StoredPage>>,
    clock: SharedClock,
    api_token: Option<Secret>,
}

impl MockLms {
    pub fn new(clock: SharedClock) -> Self {
        Self {
            pages: RwLock::new(HashMap::new()),
            clock,
            api_token: None,
        }
    }

    /// Require `Authorization: Bearer <token>` on the HTTP surface.
    pub fn with_api_token(mut self, token: impl Into<String>) -> Self {
        self.api_token = Some(Secret::new(token));
        self
    }

    /// Upsert a page body. `updated_at` always moves strictly forward so a
    /// later write is distinguishable even under a frozen clock.
    pub fn stub_update_page(&self, page: &CoursePageRef, new_body: &str) -> MockPageUpdate {
        let now = self.clock.now();
        let mut pages = self.pages.write().expect("mock page store poisoned");
        let created = !pages.contains_key(page);
        let entry = pages.entry(page.clone()).or_insert_with(|| StoredPage {
            title: page.page_slug().to_string(),
            raw_body: String::new(),
            updated_at: now - Duration::seconds(1),
        });
        let updated_at = if now > entry.updated_at {
            now
        } else {
            entry.updated_at + Duration::seconds(1)
        };
        entry.raw_body = new_body.to_string();
        entry.updated_at = updated_at;
        MockPageUpdate {
            course_id: page.course_id().to_string(),
            page_slug: page.page_slug().to_string(),
            updated_at,
            created,
        }
    }

    pub fn page_count(&self) -> usize {
        self.pages.read().expect("mock page store poisoned").len()
    }

    fn lookup(&self, page: &CoursePageRef) -> Result<PageContent, LmsError> {
        let pages = self.pages.read().expect("mock page store poisoned");
        let stored = pages.get(page).ok_or_else(|| LmsError::NotFound {
            course_id: page.course_id().to_string(),
            page_slug: page.page_slug().to_string(),
        })?;
        Ok(PageContent::from_raw(
            page.clone(),
            stored.raw_body.clone(),
            stored.updated_at,
        ))
    }

    fn authorized(&self, headers: &HeaderMap) -> bool {
        let Some(expected) = &self.api_token else {
            return true;
        };
        headers
            .get(axum::http::header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "))
            .is_some_and(|t| t == expected.expose())
    }

    /// Router exposing the Canvas-style page path and the mock control path.
    pub fn router(self: Arc<Self>) -> Router {
        Router::new()
            .route(
                "/api/v1/courses/{course_id}/pages/{page_slug}",
                get(get_page),
            )
            .route("/mock/pages", post(post_page))
            .with_state(self)
    }
}

#[async_trait]
impl PageSource for MockLms {
    async fn fetch_page(&self, page: &CoursePageRef) -> Result<PageContent, LmsError> {
        self.lookup(page)
    }
}

#[derive(Serialize)]
struct PageJson<'a> {
    url: &'a str,
    title: &'a str,
    body: &'a str,
    updated_at: DateTime<Utc>,
}

#[derive(Debug, Deserialize)]
struct UpdateRequest {
    course_id: String,
    page_slug: String,
    body: String,
}

fn error_json(status: StatusCode, message: &str) -> Response {
    (status, Json(serde_json::json!({ "errors": [{ "message": message }] }))).into_response()
}

async fn get_page(
    State(lms): State<Arc<MockLms>>,
    Path((course_id, page_slug)): Path<(String, String)>,
    headers: HeaderMap,
) -> Response {
    if !lms.authorized(&headers) {
        return error_json(StatusCode::UNAUTHORIZED, "Invalid access token.");
    }
    let Ok(page) = CoursePageRef::new(course_id, page_slug) else {
        return error_json(StatusCode::NOT_FOUND, "The specified resource does not exist.");
    };
    let pages = lms.pages.read().expect("mock page store poisoned");
    match pages.get(&page) {
        Some(stored) => Json(PageJson {
            url: page.page_slug(),
            title: &stored.title,
            body: &stored.raw_body,
            updated_at: stored.updated_at,
        })
        .into_response(),
        None => error_json(StatusCode::NOT_FOUND, "The specified resource does not exist."),
    }
}

async fn post_page(
    State(lms): State<Arc<MockLms>>,
    headers: HeaderMap,
    body: axum::body::Bytes,
) -> Response {
    if !lms.authorized(&headers) {
        return error_json(StatusCode::UNAUTHORIZED, "Invalid access token.");
    }
    let req: UpdateRequest = match serde_json::from_slice(&body) {
        Ok(r) => r,
        Err(e) => return error_json(StatusCode::UNPROCESSABLE_ENTITY, &e.to_string()),
    };
    match CoursePageRef::new(req.course_id, req.page_slug) {
        Ok(page) => Json(lms.stub_update_page(&page, &req.body)).into_response(),
        Err(e) => error_json(StatusCode::UNPROCESSABLE_ENTITY, &e.to_string()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::MockClock;

    fn page(slug: &str) -> CoursePageRef {
        CoursePageRef::new("c1", slug).unwrap()
    }

    #[tokio::test]
    async fn seeded_page_round_trips() {
        let lms = MockLms::new(Arc::new(MockClock::at_rfc3339("2024-10-01T08:00:00Z")));
        lms.stub_update_page(&page("general-info"), "Grading: 5 tests");
        let got = lms.fetch_page(&page("general-info")).await.unwrap();
        assert_eq!(got.body, "Grading: 5 tests");
    }

    #[tokio::test]
    async fn missing_page_is_not_found() {
        let lms = MockLms::new(Arc::new(MockClock::at_rfc3339("2024-10-01T08:00:00Z")));
        let err = lms.fetch_page(&page("missing")).await.unwrap_err();
        assert!(matches!(err, LmsError::NotFound { .. }));
    }

    #[tokio::test]
    async fn update_bumps_timestamp_even_with_frozen_clock() {
        let lms = MockLms::new(Arc::new(MockClock::at_rfc3339("2024-10-01T08:00:00Z")));
        let first = lms.stub_update_page(&page("p"), "A");
        assert!(first.created);
        let second = lms.stub_update_page(&page("p"), "B");
        assert!(!second.created);
        assert!(second.updated_at > first.updated_at);
        let got = lms.fetch_page(&page("p")).await.unwrap();
        assert_eq!(got.body, "B");
        assert_eq!(got.updated_at, second.updated_at);
    }
}
