use std::path::{Path, PathBuf};

use serde::Deserialize;
use url::Url;

use crate::dcci::{KbRegistry, KnowledgeBaseConfig, DEFAULT_RESERVED_OUTPUT};
use crate::lms::Secret;
use crate::router::{client_for, default_registry, validate_registry, ProviderProfile};

pub const ENV_LISTEN: &str = "DCCI_LISTEN";
pub const ENV_LMS_TOKEN: &str = "DCCI_LMS_TOKEN";
pub const ENV_ADMIN_TOKEN: &str = "DCCI_ADMIN_TOKEN";
pub const ENV_SALT: &str = "DCCI_SALT";

/// A configuration problem, located by the dotted path of the field.
#[derive(Debug, thiserror::Error, Clone, PartialEq, Eq)]
#[error("config error at {field}: {message}")]
pub struct ConfigError {
    pub field: String,
    pub message: String,
}

impl ConfigError {
    pub fn new(field: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            field: field.into(),
            message: message.into(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LmsConfig {
    /// Serve pages from the embedded mock platform instead of a real LMS.
    #[serde(default)]
    pub mock: bool,
    #[serde(default)]
    pub base_url: Option<Url>,
    #[serde(default)]
    pub api_token: Secret,
    pub course_id: String,
    /// Standard base64 Ed25519 key that signs launches.
    #[serde(default)]
    pub platform_public_key: Option<String>,
    /// Mock mode: hex seed for the embedded platform signer.
    #[serde(default)]
    pub mock_platform_seed: Option<Secret>,
    /// Mock mode: directory of `<page_slug>.<ext>` files loaded as pages.
    #[serde(default)]
    pub mock_pages_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StoreConfig {
    /// Append-log file; the store is in-memory when absent.
    #[serde(default)]
    pub path: Option<PathBuf>,
    #[serde(default)]
    pub compact_every: Option<usize>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchConfig {
    /// JSON fixture file for the fixture backend.
    #[serde(default)]
    pub fixtures: Option<PathBuf>,
    /// Live backend endpoint; off unless set.
    #[serde(default)]
    pub endpoint: Option<Url>,
    #[serde(default = "default_search_timeout")]
    pub timeout_secs: u64,
    #[serde(default)]
    pub organic_k: Option<usize>,
}

fn default_search_timeout() -> u64 {
    10
}

fn default_listen() -> String {
    "127.0.0.1:8080".into()
}

fn default_session_timeout() -> i64 {
    30
}

fn default_reserved() -> u64 {
    DEFAULT_RESERVED_OUTPUT
}

fn default_ui_url() -> String {
    "/ui".into()
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServiceConfig {
    #[serde(default = "default_listen")]
    pub listen_address: String,
    #[serde(default = "default_session_timeout")]
    pub session_timeout_minutes: i64,
    #[serde(default)]
    pub pseudonym_salt: Secret,
    #[serde(default)]
    pub admin_token: Secret,
    #[serde(default = "default_reserved")]
    pub reserved_output_tokens: u64,
    #[serde(default = "default_ui_url")]
    pub ui_url: String,
    pub lms: LmsConfig,
    /// Defaults to the four standard knowledge bases of `lms.course_id`.
    #[serde(default)]
    pub knowledge_bases: Vec<KnowledgeBaseConfig>,
    #[serde(default = "default_registry")]
    pub providers: Vec<ProviderProfile>,
    #[serde(default)]
    pub store: StoreConfig,
    #[serde(default)]
    pub search: SearchConfig,
}

impl ServiceConfig {
    /// Read, apply environment overrides, resolve relative paths against the
    /// file's directory and validate.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::new("(file)", format!("{}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text)?;
        cfg.apply_env(|k| std::env::var(k).ok());
        if let Some(base) = path.parent() {
            cfg.resolve_paths(base);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| {
            let field = e
                .message()
                .split('`')
                .nth(1)
                .filter(|_| e.message().starts_with("missing field") || e.message().starts_with("unknown field"))
                .unwrap_or("(file)")
                .to_string();
            ConfigError::new(field, e.message().trim().to_string())
        })
    }

    pub fn apply_env(&mut self, var: impl Fn(&str) -> Option<String>) {
        if let Some(v) = var(ENV_LISTEN) {
            self.listen_address = v;
        }
        if let Some(v) = var(ENV_LMS_TOKEN) {
            self.lms.api_token = Secret::new(v);
        }
        if let Some(v) = var(ENV_ADMIN_TOKEN) {
            self.admin_token = Secret::new(v);
        }
        if let Some(v) = var(ENV_SALT) {
            self.pseudonym_salt = Secret::new(v);
        }
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(path) = p.as_mut().filter(|p| p.is_relative()) {
                *path = base.join(&*path);
            }
        };
        fix(&mut self.store.path);
        fix(&mut self.search.fixtures);
        fix(&mut self.lms.mock_pages_dir);
    }

    pub fn kb_registry(&self) -> Result<KbRegistry, ConfigError> {
        if self.knowledge_bases.is_empty() {
            return Ok(KbRegistry::standard(&self.lms.course_id));
        }
        for (i, kb) in self.knowledge_bases.iter().enumerate() {
            kb.validate()
                .map_err(|e| ConfigError::new(format!("knowledge_bases[{i}]"), e.to_string()))?;
        }
        KbRegistry::new(self.knowledge_bases.clone()).map_err(|e| ConfigError::new("knowledge_bases", e.to_string()))
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        validate_listen(&self.listen_address)?;
        if self.pseudonym_salt.is_empty() {
            return Err(ConfigError::new("pseudonym_salt", format!("must be set (or provide {ENV_SALT})")));
        }
        if self.admin_token.is_empty() {
            return Err(ConfigError::new("admin_token", format!("must be set (or provide {ENV_ADMIN_TOKEN})")));
        }
        if self.session_timeout_minutes <= 0 {
            return Err(ConfigError::new("session_timeout_minutes", "must be positive"));
        }
        if self.reserved_output_tokens == 0 {
            return Err(ConfigError::new("reserved_output_tokens", "must be positive"));
        }
        if self.lms.course_id.trim().is_empty() {
            return Err(ConfigError::new("lms.course_id", "must not be empty"));
        }
        if !self.lms.mock {
            if self.lms.base_url.is_none() {
                return Err(ConfigError::new("lms.base_url", "required unless lms.mock = true"));
            }
            if self.lms.api_token.is_empty() {
                return Err(ConfigError::new("lms.api_token", format!("required unless lms.mock = true (or provide {ENV_LMS_TOKEN})")));
            }
            if self.lms.platform_public_key.is_none() {
                return Err(ConfigError::new("lms.platform_public_key", "required unless lms.mock = true"));
            }
        }
        if let Some(seed) = &self.lms.mock_platform_seed {
            parse_seed(seed).map_err(|m| ConfigError::new("lms.mock_platform_seed", m))?;
        }
        let registry = self.kb_registry()?;
        if registry.is_empty() {
            return Err(ConfigError::new("knowledge_bases", "at least one knowledge base is required"));
        }
        validate_registry(&self.providers).map_err(|e| ConfigError::new("providers", e.to_string()))?;
        for (i, p) in self.providers.iter().enumerate() {
            if p.window_tokens <= self.reserved_output_tokens {
                return Err(ConfigError::new(
                    format!("providers[{i}].window_tokens"),
                    "must exceed reserved_output_tokens",
                ));
            }
            client_for(&p.endpoint, p.model.as_deref(), None)
                .map_err(|m| ConfigError::new(format!("providers[{i}].endpoint"), m))?;
        }
        Ok(())
    }
}

fn validate_listen(addr: &str) -> Result<(), ConfigError> {
    let field = "listen_address";
    let (host, port) = addr
        .rsplit_once(':')
        .ok_or_else(|| ConfigError::new(field, format!("{addr:?} is not host:port")))?;
    if host.is_empty() {
        return Err(ConfigError::new(field, format!("{addr:?} has no host")));
    }
    port.parse::<u16>()
        .map_err(|_| ConfigError::new(field, format!("invalid port {port:?}")))?;
    Ok(())
}

pub(crate) fn parse_seed(seed: &Secret) -> Result<[u8; 32], String> {
    let bytes = hex::decode(seed.expose().trim()).map_err(|_| "must be hex".to_string())?;
    bytes.try_into().map_err(|_| "must be 32 bytes (64 hex digits)".to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
        pseudonym_salt = "pepper"
        admin_token = "admin"
        [lms]
        mock = true
        course_id = "c1"
    "#;

    #[test]
    fn minimal_mock_config() {
        let cfg = ServiceConfig::parse(MINIMAL).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.kb_registry().unwrap().len(), 4);
        assert_eq!(cfg.providers.len(), 2);
    }

    #[test]
    fn missing_salt_names_field() {
        let cfg = ServiceConfig::parse(&MINIMAL.replace(r#"pseudonym_salt = "pepper""#, "")).unwrap();
        assert_eq!(cfg.validate().unwrap_err().field, "pseudonym_salt");
    }

    #[test]
    fn bad_port() {
        let mut cfg = ServiceConfig::parse(MINIMAL).unwrap();
        cfg.listen_address = "127.0.0.1:99999".into();
        assert_eq!(cfg.validate().unwrap_err().field, "listen_address");
        cfg.listen_address = "127.0.0.1:http".into();
        assert_eq!(cfg.validate().unwrap_err().field, "listen_address");
    }

    #[test]
    fn env_overrides() {
        let mut cfg = ServiceConfig::parse(&MINIMAL.replace(r#"pseudonym_salt = "pepper""#, "")).unwrap();
        cfg.apply_env(|k| match k {
            ENV_SALT => Some("from-env".into()),
            ENV_LISTEN => Some("0.0.0.0:9000".into()),
            _ => None,
        });
        cfg.validate().unwrap();
        assert_eq!(cfg.pseudonym_salt.expose(), "from-env");
        assert_eq!(cfg.listen_address, "0.0.0.0:9000");
    }

    #[test]
    fn remote_lms_requires_credentials() {
        let cfg = ServiceConfig::parse(&MINIMAL.replace("mock = true", "mock = false")).unwrap();
        assert_eq!(cfg.validate().unwrap_err().field, "lms.base_url");
    }

    #[test]
    fn provider_errors_are_located() {
        let text = format!(
            "{MINIMAL}\n[[providers]]\nprovider_id = \"p\"\nwindow_tokens = 8192\nrpm_limit = 10\ntpm_limit = \"unlimited\"\npriority = 0\nendpoint = \"mock:nonsense\"\n"
        );
        let cfg = ServiceConfig::parse(&text).unwrap();
        assert_eq!(cfg.validate().unwrap_err().field, "providers[0].endpoint");
        let err = ServiceConfig::parse(&format!("{MINIMAL}\nlisten = 1\n")).unwrap_err();
        assert_eq!(err.field, "listen");
    }

    #[test]
    fn secrets_do_not_leak_through_debug() {
        let cfg = ServiceConfig::parse(MINIMAL).unwrap();
        let dump = format!("{cfg:?}");
        assert!(!dump.contains("pepper") && !dump.contains("\"admin\""));
    }
}
