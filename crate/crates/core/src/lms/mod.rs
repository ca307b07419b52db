//! LMS bridge: Canvas-style page retrieval, signed launch validation and an
//! embedded mock platform for tests and desk-scale operation.

mod client;
mod launch;
mod markup;
mod mock;

use std::fmt;
use std::sync::Arc;

use async_trait::async_trait;
use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use url::Url;

pub use client::LmsClient;
pub use launch::{
    LaunchClaims, LaunchContext, LaunchError, LaunchValidator, NonceRegistry, PlatformSigner,
    CONTEXT_CLAIM, DEFAULT_MAX_AGE_SECS, ROLES_CLAIM,
};
pub use markup::strip_markup;
pub use mock::{MockLms, MockPageUpdate};

/// Default tolerance applied to LMS-provided timestamps.
pub const DEFAULT_CLOCK_SKEW_SECS: i64 = 30;

#[derive(Debug, thiserror::Error, Clone, PartialEq, Eq)]
pub enum LmsError {
    #[error("page {page_slug:?} not found in course {course_id:?}")]
    NotFound { course_id: String, page_slug: String },
    #[error("LMS rejected the API token")]
    AuthError,
    #[error("transport error: {0}")]
    Transport(String),
    #[error("malformed LMS response: {0}")]
    Malformed(String),
    #[error("mock platform is disabled when running against a real LMS")]
    MockDisabled,
    #[error("invalid page reference: {0}")]
    InvalidRef(String),
}

/// Identifies one LMS page by course and URL slug.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "RawPageRef")]
pub struct CoursePageRef {
    course_id: String,
    page_slug: String,
}

#[derive(Deserialize)]
struct RawPageRef {
    course_id: String,
    page_slug: String,
}

impl TryFrom<RawPageRef> for CoursePageRef {
    type Error = LmsError;

    fn try_from(raw: RawPageRef) -> Result<Self, Self::Error> {
        CoursePageRef::new(raw.course_id, raw.page_slug)
    }
}

impl CoursePageRef {
    pub fn new(course_id: impl Into<String>, page_slug: impl Into<String>) -> Result<Self, LmsError> {
        let course_id = course_id.into();
        let page_slug = page_slug.into();
        if course_id.trim().is_empty() {
            return Err(LmsError::InvalidRef("course_id is empty".into()));
        }
        if page_slug.is_empty() {
            return Err(LmsError::InvalidRef("page_slug is empty".into()));
        }
        if page_slug.chars().any(char::is_whitespace) {
            return Err(LmsError::InvalidRef(format!(
                "page_slug {page_slug:?} contains whitespace"
            )));
        }
        Ok(Self { course_id, page_slug })
    }

    pub fn course_id(&self) -> &str {
        &self.course_id
    }

    pub fn page_slug(&self) -> &str {
        &self.page_slug
    }
}

impl fmt::Display for CoursePageRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.course_id, self.page_slug)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PageContent {
    pub page: CoursePageRef,
    /// Markup-stripped projection of `raw_body`.
    pub body: String,
    pub updated_at: DateTime<Utc>,
    pub raw_body: String,
}

impl PageContent {
    pub fn from_raw(page: CoursePageRef, raw_body: String, updated_at: DateTime<Utc>) -> Self {
        Self {
            page,
            body: strip_markup(&raw_body),
            updated_at,
            raw_body,
        }
    }
}

/// A secret that never appears in `Debug` output or serialized records.
#[derive(Clone, Default, PartialEq, Eq, Deserialize)]
#[serde(transparent)]
pub struct Secret(String);

impl Secret {
    pub fn new(value: impl Into<String>) -> Self {
        Self(value.into())
    }

    pub fn expose(&self) -> &str {
        &self.0
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl fmt::Debug for Secret {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("Secret(***)")
    }
}

impl Serialize for Secret {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str("***")
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LmsCredentials {
    pub base_url: Url,
    pub api_token: Secret,
}

impl LmsCredentials {
    pub fn new(base_url: Url, api_token: impl Into<String>) -> Self {
        Self {
            base_url,
            api_token: Secret::new(api_token),
        }
    }
}

/// Anything that can hand back the current content of a course page.
#[async_trait]
pub trait PageSource: Send + Sync {
    async fn fetch_page(&self, page: &CoursePageRef) -> Result<PageContent, LmsError>;
}

/// Either a real LMS reached over HTTP or the embedded mock platform.
#[derive(Clone)]
pub enum LmsBridge {
    Remote(Arc<LmsClient>),
    Mock(Arc<MockLms>),
}

impl LmsBridge {
    pub fn mock(&self) -> Option<&Arc<MockLms>> {
        match self {
            LmsBridge::Mock(m) => Some(m),
            LmsBridge::Remote(_) => None,
        }
    }

    pub fn stub_update_page(&self, page: &CoursePageRef, new_body: &str) -> Result<MockPageUpdate, LmsError> {
        match self {
            LmsBridge::Mock(m) => Ok(m.stub_update_page(page, new_body)),
            LmsBridge::Remote(_) => Err(LmsError::MockDisabled),
        }
    }
}

#[async_trait]
impl PageSource for LmsBridge {
    async fn fetch_page(&self, page: &CoursePageRef) -> Result<PageContent, LmsError> {
        match self {
            LmsBridge::Remote(c) => c.fetch_page(page).await,
            LmsBridge::Mock(m) => m.fetch_page(page).await,
        }
    }
}
