use std::collections::HashSet;
use std::fmt;

use serde::de::{self, Visitor};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::RouterError;

/// A quota that is either a positive ceiling or absent.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Limit {
    Max(u64),
    Unlimited,
}

impl Limit {
    pub fn allows(self, value: u64) -> bool {
        match self {
            Limit::Max(max) => value <= max,
            Limit::Unlimited => true,
        }
    }
}

impl Serialize for Limit {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Limit::Max(n) => s.serialize_u64(*n),
            Limit::Unlimited => s.serialize_str("unlimited"),
        }
    }
}

impl<'de> Deserialize<'de> for Limit {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        struct LimitVisitor;

        impl Visitor<'_> for LimitVisitor {
            type Value = Limit;

            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a positive integer or \"unlimited\"")
            }

            fn visit_u64<E: de::Error>(self, v: u64) -> Result<Limit, E> {
                if v == 0 {
                    return Err(E::custom("limit must be positive"));
                }
                Ok(Limit::Max(v))
            }

            fn visit_i64<E: de::Error>(self, v: i64) -> Result<Limit, E> {
                u64::try_from(v)
                    .map_err(|_| E::custom("limit must be positive"))
                    .and_then(|v| self.visit_u64(v))
            }

            fn visit_str<E: de::Error>(self, v: &str) -> Result<Limit, E> {
                if v.eq_ignore_ascii_case("unlimited") {
                    Ok(Limit::Unlimited)
                } else {
                    Err(E::invalid_value(de::Unexpected::Str(v), &self))
                }
            }
        }

        d.deserialize_any(LimitVisitor)
    }
}

fn default_timeout() -> u64 {
    30
}

fn default_unlimited() -> Limit {
    Limit::Unlimited
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProviderProfile {
    pub provider_id: String,
    pub window_tokens: u64,
    #[serde(default = "default_unlimited")]
    pub rpm_limit: Limit,
    #[serde(default = "default_unlimited")]
    pub tpm_limit: Limit,
    #[serde(default = "default_unlimited")]
    pub rpd_limit: Limit,
    /// Lower is preferred.
    pub priority: i32,
    /// `http(s)://` chat-completion URL or a `mock:` script.
    pub endpoint: String,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
    /// Name of the environment variable holding the provider API key.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub api_key_env: Option<String>,
}

impl ProviderProfile {
    /// Paid cloud tier: 1,048,576-token window, 2,000 RPM, 4M TPM.
    pub fn cloud_primary() -> Self {
        Self {
            provider_id: "cloud-primary".into(),
            window_tokens: 1_048_576,
            rpm_limit: Limit::Max(2_000),
            tpm_limit: Limit::Max(4_000_000),
            rpd_limit: Limit::Unlimited,
            priority: 0,
            endpoint: "mock:echo".into(),
            timeout_secs: 30,
            model: None,
            api_key_env: None,
        }
    }

    /// Free cloud tier: 15 RPM, 1M TPM, 1,500 requests per day.
    pub fn cloud_free_tier() -> Self {
        Self {
            provider_id: "cloud-free-tier".into(),
            rpm_limit: Limit::Max(15),
            tpm_limit: Limit::Max(1_000_000),
            rpd_limit: Limit::Max(1_500),
            ..Self::cloud_primary()
        }
    }

    /// Locally hosted model with an 8,192-token window and no quotas.
    pub fn local_fallback() -> Self {
        Self {
            provider_id: "local-fallback".into(),
            window_tokens: 8_192,
            rpm_limit: Limit::Unlimited,
            tpm_limit: Limit::Unlimited,
            rpd_limit: Limit::Unlimited,
            priority: 1,
            endpoint: "mock:echo".into(),
            timeout_secs: 30,
            model: None,
            api_key_env: None,
        }
    }

    pub fn with_endpoint(mut self, endpoint: &str) -> Self {
        self.endpoint = endpoint.to_string();
        self
    }
}

/// The two-provider registry: cloud primary with local fallback.
pub fn default_registry() -> Vec<ProviderProfile> {
    vec![ProviderProfile::cloud_primary(), ProviderProfile::local_fallback()]
}

pub fn validate_registry(profiles: &[ProviderProfile]) -> Result<(), RouterError> {
    if profiles.is_empty() {
        return Err(RouterError::InvalidRegistry("no providers configured".into()));
    }
    let mut ids = HashSet::new();
    let mut priorities = HashSet::new();
    for p in profiles {
        if p.window_tokens == 0 {
            return Err(RouterError::InvalidRegistry(format!("{}: window_tokens must be positive", p.provider_id)));
        }
        if !ids.insert(p.provider_id.as_str()) {
            return Err(RouterError::InvalidRegistry(format!("duplicate provider_id {:?}", p.provider_id)));
        }
        if !priorities.insert(p.priority) {
            return Err(RouterError::InvalidRegistry(format!(
                "priority {} is shared; priorities must be strictly ordered",
                p.priority
            )));
        }
    }
    Ok(())
}
