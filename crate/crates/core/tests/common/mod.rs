#![allow(dead_code)]

use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use dcci_core::clock::MockClock;
use dcci_core::gateway::{build_state, http_router, AppState, ServiceConfig};
use dcci_core::lms::{CoursePageRef, LaunchClaims};
use http_body_util::BodyExt;
use serde_json::Value;
use tower::ServiceExt;

pub const COURSE: &str = "prog-101";
pub const ADMIN: &str = "admin-secret";
pub const SEED_HEX: &str = "0101010101010101010101010101010101010101010101010101010101010101";

pub fn fixture(name: &str) -> String {
    std::fs::read_to_string(format!("{}/tests/fixtures/{name}", env!("CARGO_MANIFEST_DIR"))).unwrap()
}

pub struct Options {
    pub start: &'static str,
    pub cache_ttl: u64,
    pub primary: &'static str,
    pub fallback: &'static str,
    pub store_path: Option<std::path::PathBuf>,
}

impl Default for Options {
    fn default() -> Self {
        Self {
            start: "2024-10-09T12:00:00Z",
            cache_ttl: 0,
            primary: "mock:echo",
            fallback: "mock:echo",
            store_path: None,
        }
    }
}

pub fn config_text(o: &Options) -> String {
    let kb = |id: &str, name: &str, kind: &str, slug: Option<&str>, template: &str| {
        let page = slug
            .map(|s| format!("page_ref = {{ course_id = \"{COURSE}\", page_slug = \"{s}\" }}\n"))
            .unwrap_or_default();
        format!(
            "[[knowledge_bases]]\nkb_id = \"{id}\"\ndisplay_name = \"{name}\"\nsource_kind = \"{kind}\"\n{page}template_id = \"{template}\"\ncache_ttl = {}\n",
            o.cache_ttl
        )
    };
    let store = o
        .store_path
        .as_ref()
        .map(|p| format!("[store]\npath = {:?}\n", p.display().to_string()))
        .unwrap_or_default();
    format!(
        r#"listen_address = "127.0.0.1:0"
pseudonym_salt = "test-salt"
admin_token = "{ADMIN}"

[lms]
mock = true
course_id = "{COURSE}"
mock_platform_seed = "{SEED_HEX}"

[search]
fixtures = "{fixtures}/tests/fixtures/search.json"

{kbs}
[[providers]]
provider_id = "cloud-primary"
window_tokens = 1048576
rpm_limit = 2000
tpm_limit = 4000000
priority = 0
endpoint = "{primary}"

[[providers]]
provider_id = "local-fallback"
window_tokens = 8192
rpm_limit = "unlimited"
tpm_limit = "unlimited"
priority = 1
endpoint = "{fallback}"

{store}"#,
        fixtures = env!("CARGO_MANIFEST_DIR"),
        kbs = [
            kb("general-info", "General Course Information", "lms_page", Some("general-info"), "course_content"),
            kb("tms-manual", "TMS User Manual", "lms_page", Some("tms-user-manual"), "course_content"),
            kb("weekly-topic", "Weekly Topic", "curriculum_navigator", Some("curriculum-navigator"), "weekly_topic"),
            kb("internet-wizard", "Internet Wizard", "web_search", None, "web_search"),
        ]
        .concat(),
        primary = o.primary,
        fallback = o.fallback,
    )
}

pub struct Harness {
    pub state: Arc<AppState>,
    pub app: axum::Router,
    pub clock: Arc<MockClock>,
}

impl Harness {
    pub fn new(o: Options) -> Self {
        let clock = Arc::new(MockClock::at_rfc3339(o.start));
        let config = ServiceConfig::parse(&config_text(&o)).unwrap();
        let state = build_state(&config, clock.clone()).unwrap();
        let app = http_router(state.clone());
        let h = Self { state, app, clock };
        h.set_page("general-info", "<p>Exam is Dec 12 in room B-204.</p>");
        h.set_page("tms-user-manual", "<p>Log in to the TMS with your campus ID.</p>");
        h.set_page("curriculum-navigator", &fixture("curriculum_14w.json"));
        h
    }

    pub fn set_page(&self, slug: &str, body: &str) {
        let page = CoursePageRef::new(COURSE, slug).unwrap();
        self.state.mock_lms().unwrap().stub_update_page(&page, body);
    }

    pub fn signed_launch(&self, user: &str, name: &str, nonce: &str) -> String {
        let claims = LaunchClaims::learner(user, name, COURSE, self.clock_now(), nonce);
        self.state.mock_signer().unwrap().sign(&claims)
    }

    pub fn clock_now(&self) -> chrono::DateTime<chrono::Utc> {
        use dcci_core::clock::Clock;
        self.clock.now()
    }

    pub async fn request(&self, method: &str, path: &str, token: Option<&str>, body: Option<Value>) -> (StatusCode, Value) {
        let mut req = Request::builder().method(method).uri(path);
        if let Some(t) = token {
            req = req.header("authorization", format!("Bearer {t}"));
        }
        let body = match body {
            Some(v) => {
                req = req.header("content-type", "application/json");
                Body::from(v.to_string())
            }
            None => Body::empty(),
        };
        let resp = self.app.clone().oneshot(req.body(body).unwrap()).await.unwrap();
        let status = resp.status();
        let bytes = resp.into_body().collect().await.unwrap().to_bytes();
        let value = if bytes.is_empty() {
            Value::Null
        } else {
            serde_json::from_slice(&bytes).unwrap_or_else(|_| Value::String(String::from_utf8_lossy(&bytes).into()))
        };
        (status, value)
    }

    pub async fn launch(&self, user: &str, name: &str) -> String {
        let nonce = format!("nonce-{user}-{}", uuid::Uuid::new_v4());
        let token = self.signed_launch(user, name, &nonce);
        let (status, body) = self
            .request("POST", "/lti/launch", None, Some(serde_json::json!({ "id_token": token })))
            .await;
        assert_eq!(status, StatusCode::OK, "{body}");
        body["session_token"].as_str().unwrap().to_string()
    }

    pub async fn chat(&self, token: &str, kb_id: &str, query: &str) -> (StatusCode, Value) {
        self.request("POST", "/chat", Some(token), Some(serde_json::json!({ "kb_id": kb_id, "query": query })))
            .await
    }
}
