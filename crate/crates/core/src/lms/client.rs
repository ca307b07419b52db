use std::time::Duration;

use async_trait::async_trait;
use chrono::{DateTime, Utc};
use reqwest::StatusCode;
use serde::Deserialize;

use super::{CoursePageRef, LmsCredentials, LmsError, PageContent, PageSource, DEFAULT_CLOCK_SKEW_SECS};
use crate::clock::{SharedClock, SystemClock};

/// Stateless Canvas-style REST client. Safe to share across tasks.
pub struct LmsClient {
    http: reqwest::Client,
    creds: LmsCredentials,
    clock: SharedClock,
    clock_skew: chrono::Duration,
}

/// Subset of the Canvas page object this client consumes.
#[derive(Debug, Deserialize)]
struct PageResponse {
    #[serde(default)]
    body: Option<String>,
    updated_at: DateTime<Utc>,
}

impl LmsClient {
    pub fn new(creds: LmsCredentials) -> Self {
        Self::with_clock(creds, std::sync::Arc::new(SystemClock))
    }

    pub fn with_clock(creds: LmsCredentials, clock: SharedClock) -> Self {
        let http = reqwest::Client::builder()
            .timeout(Duration::from_secs(30))
            .build()
            .expect("reqwest client builds with static settings");
        Self {
            http,
            creds,
            clock,
            clock_skew: chrono::Duration::seconds(DEFAULT_CLOCK_SKEW_SECS),
        }
    }

    pub fn clock_skew(mut self, skew: chrono::Duration) -> Self {
        self.clock_skew = skew;
        self
    }

    /// `{base_url}/api/v1/courses/{course_id}/pages/{page_slug}`
    pub fn page_url(&self, page: &CoursePageRef) -> Result<url::Url, LmsError> {
        let mut url = self.creds.base_url.clone();
        url.path_segments_mut()
            .map_err(|_| LmsError::InvalidRef("base_url cannot carry a path".into()))?
            .pop_if_empty()
            .extend(["api", "v1", "courses", page.course_id(), "pages", page.page_slug()]);
        Ok(url)
    }

    pub async fn fetch_page(&self, page: &CoursePageRef) -> Result<PageContent, LmsError> {
        let url = self.page_url(page)?;
        let response = self
            .http
            .get(url)
            .bearer_auth(self.creds.api_token.expose())
            .send()
            .await
            .map_err(|e| LmsError::Transport(describe(&e)))?;

        match response.status() {
            s if s.is_success() => {}
            StatusCode::NOT_FOUND => {
                return Err(LmsError::NotFound {
                    course_id: page.course_id().to_string(),
                    page_slug: page.page_slug().to_string(),
                })
            }
            StatusCode::UNAUTHORIZED | StatusCode::FORBIDDEN => return Err(LmsError::AuthError),
            s => return Err(LmsError::Transport(format!("unexpected status {s}"))),
        }

        let text = response
            .text()
            .await
            .map_err(|e| LmsError::Transport(describe(&e)))?;
        let parsed: PageResponse =
            serde_json::from_str(&text).map_err(|e| LmsError::Malformed(e.to_string()))?;

        let fetched_at = self.clock.now();
        if parsed.updated_at > fetched_at + self.clock_skew {
            return Err(LmsError::Malformed(format!(
                "updated_at {} is ahead of fetch time {}",
                parsed.updated_at, fetched_at
            )));
        }

        Ok(PageContent::from_raw(
            page.clone(),
            parsed.body.unwrap_or_default(),
            parsed.updated_at,
        ))
    }
}

#[async_trait]
impl PageSource for LmsClient {
    async fn fetch_page(&self, page: &CoursePageRef) -> Result<PageContent, LmsError> {
        LmsClient::fetch_page(self, page).await
    }
}

// reqwest errors carry the URL but never request headers, so the bearer
// token cannot leak through here.
fn describe(e: &reqwest::Error) -> String {
    if e.is_timeout() {
        "request timed out".to_string()
    } else if e.is_connect() {
        format!("connection failed: {e}")
    } else {
        e.to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn page_url_follows_canvas_layout() {
        let creds = LmsCredentials::new("https://lms.example/canvas/".parse().unwrap(), "t");
        let client = LmsClient::new(creds);
        let page = CoursePageRef::new("c 1", "general-info").unwrap();
        assert_eq!(
            client.page_url(&page).unwrap().as_str(),
            "https://lms.example/canvas/api/v1/courses/c%201/pages/general-info"
        );
    }
}
