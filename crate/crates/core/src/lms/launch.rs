//! Signed LMS launch messages.
//!
//! A launch is a compact three-part token `header.claims.signature`
//! (base64url, no padding) whose claims mirror the LTI 1.3 resource-link
//! launch: `sub`, `name`, `iat`, `nonce`, plus the LTI context and roles
//! claims. The signature is Ed25519 over `header.claims`.

use std::collections::{BTreeSet, HashMap};
use std::sync::Mutex;

use base64::engine::general_purpose::{STANDARD, URL_SAFE_NO_PAD};
use base64::Engine;
use chrono::{DateTime, Duration, TimeZone, Utc};
use ed25519_dalek::{Signature, Signer, SigningKey, Verifier, VerifyingKey};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::DEFAULT_CLOCK_SKEW_SECS;

pub const CONTEXT_CLAIM: &str = "https://purl.imsglobal.org/spec/lti/claim/context";
pub const ROLES_CLAIM: &str = "https://purl.imsglobal.org/spec/lti/claim/roles";
pub const DEFAULT_MAX_AGE_SECS: i64 = 300;

const HEADER: &str = r#"{"alg":"EdDSA","typ":"JWT"}"#;

#[derive(Debug, thiserror::Error, Clone, PartialEq, Eq)]
pub enum LaunchError {
    #[error("launch signature does not verify")]
    BadSignature,
    #[error("launch nonce was already used")]
    ReplayedNonce,
    #[error("launch is outside the acceptance window")]
    Expired,
    #[error("launch is missing claim {0:?}")]
    MissingClaim(String),
    #[error("launch message is malformed: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LaunchContext {
    pub user_id: String,
    pub display_name: String,
    pub course_id: String,
    pub roles: BTreeSet<String>,
    pub issued_at: DateTime<Utc>,
    pub nonce: String,
}

/// Claims as they travel on the wire.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LaunchClaims {
    pub sub: String,
    pub name: String,
    pub iat: i64,
    pub nonce: String,
    #[serde(rename = "https://purl.imsglobal.org/spec/lti/claim/context")]
    pub context: LtiContextClaim,
    #[serde(rename = "https://purl.imsglobal.org/spec/lti/claim/roles", default)]
    pub roles: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LtiContextClaim {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub title: Option<String>,
}

impl LaunchClaims {
    pub fn learner(user_id: &str, name: &str, course_id: &str, issued_at: DateTime<Utc>, nonce: &str) -> Self {
        Self {
            sub: user_id.to_string(),
            name: name.to_string(),
            iat: issued_at.timestamp(),
            nonce: nonce.to_string(),
            context: LtiContextClaim {
                id: course_id.to_string(),
                title: None,
            },
            roles: vec!["http://purl.imsglobal.org/vocab/lis/v2/membership#Learner".to_string()],
        }
    }
}

/// Platform side of the launch: signs claims. Used by the mock platform and
/// by tests.
pub struct PlatformSigner {
    key: SigningKey,
}

impl PlatformSigner {
    pub fn from_seed(seed: [u8; 32]) -> Self {
        Self {
            key: SigningKey::from_bytes(&seed),
        }
    }

    pub fn generate() -> Self {
        Self {
            key: SigningKey::generate(&mut rand::rngs::OsRng),
        }
    }

    pub fn verifying_key(&self) -> VerifyingKey {
        self.key.verifying_key()
    }

    pub fn public_key_b64(&self) -> String {
        STANDARD.encode(self.key.verifying_key().as_bytes())
    }

    pub fn sign(&self, claims: &LaunchClaims) -> String {
        let payload = serde_json::to_string(claims).expect("claims serialize");
        self.sign_payload(&payload)
    }

    /// Sign an arbitrary JSON payload. Lets tests build launches with
    /// missing or odd claims.
    pub fn sign_payload(&self, payload_json: &str) -> String {
        let signing_input = format!(
            "{}.{}",
            URL_SAFE_NO_PAD.encode(HEADER),
            URL_SAFE_NO_PAD.encode(payload_json)
        );
        let signature = self.key.sign(signing_input.as_bytes());
        format!("{signing_input}.{}", URL_SAFE_NO_PAD.encode(signature.to_bytes()))
    }
}

/// Shared set of seen nonces with expiry. Insert-if-absent is atomic.
#[derive(Default)]
pub struct NonceRegistry {
    seen: Mutex<HashMap<String, DateTime<Utc>>>,
}

impl NonceRegistry {
    /// Returns `false` if `nonce` is already live.
    pub fn insert_if_absent(&self, nonce: &str, expires_at: DateTime<Utc>, now: DateTime<Utc>) -> bool {
        let mut seen = self.seen.lock().expect("nonce registry poisoned");
        seen.retain(|_, exp| *exp > now);
        if seen.contains_key(nonce) {
            return false;
        }
        seen.insert(nonce.to_string(), expires_at);
        true
    }

    pub fn len(&self) -> usize {
        self.seen.lock().expect("nonce registry poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub struct LaunchValidator {
    platform_key: VerifyingKey,
    nonces: NonceRegistry,
    max_age: Duration,
    clock_skew: Duration,
}

impl LaunchValidator {
    pub fn new(platform_key: VerifyingKey) -> Self {
        Self {
            platform_key,
            nonces: NonceRegistry::default(),
            max_age: Duration::seconds(DEFAULT_MAX_AGE_SECS),
            clock_skew: Duration::seconds(DEFAULT_CLOCK_SKEW_SECS),
        }
    }

    pub fn from_public_key_b64(encoded: &str) -> Result<Self, LaunchError> {
        let bytes = STANDARD
            .decode(encoded.trim())
            .map_err(|e| LaunchError::Malformed(format!("platform key: {e}")))?;
        let bytes: [u8; 32] = bytes
            .try_into()
            .map_err(|_| LaunchError::Malformed("platform key must be 32 bytes".into()))?;
        let key = VerifyingKey::from_bytes(&bytes)
            .map_err(|e| LaunchError::Malformed(format!("platform key: {e}")))?;
        Ok(Self::new(key))
    }

    pub fn max_age(mut self, max_age: Duration) -> Self {
        self.max_age = max_age;
        self
    }

    pub fn clock_skew(mut self, skew: Duration) -> Self {
        self.clock_skew = skew;
        self
    }

    /// Verify signature, claims, age and nonce uniqueness, in that order.
    /// The nonce is only consumed by launches that pass every other check.
    pub fn validate(&self, signed_launch: &str, now: DateTime<Utc>) -> Result<LaunchContext, LaunchError> {
        let mut parts = signed_launch.trim().split('.');
        let (Some(header_b64), Some(claims_b64), Some(sig_b64), None) =
            (parts.next(), parts.next(), parts.next(), parts.next())
        else {
            return Err(LaunchError::Malformed("expected three dot-separated parts".into()));
        };

        let sig_bytes = URL_SAFE_NO_PAD
            .decode(sig_b64)
            .map_err(|_| LaunchError::BadSignature)?;
        let signature = Signature::from_slice(&sig_bytes).map_err(|_| LaunchError::BadSignature)?;
        let signing_input = &signed_launch.trim()[..header_b64.len() + 1 + claims_b64.len()];
        self.platform_key
            .verify(signing_input.as_bytes(), &signature)
            .map_err(|_| LaunchError::BadSignature)?;

        let header: Value = decode_json(header_b64)?;
        if header.get("alg").and_then(Value::as_str) != Some("EdDSA") {
            return Err(LaunchError::Malformed("unsupported alg".into()));
        }
        let claims: Value = decode_json(claims_b64)?;

        let user_id = string_claim(&claims, "sub")?;
        let display_name = string_claim(&claims, "name")?;
        let nonce = string_claim(&claims, "nonce")?;
        let iat = claims
            .get("iat")
            .and_then(Value::as_i64)
            .ok_or_else(|| LaunchError::MissingClaim("iat".into()))?;
        let course_id = claims
            .get(CONTEXT_CLAIM)
            .and_then(|c| c.get("id"))
            .and_then(Value::as_str)
            .filter(|s| !s.is_empty())
            .ok_or_else(|| LaunchError::MissingClaim(format!("{CONTEXT_CLAIM}.id")))?
            .to_string();
        let roles = claims
            .get(ROLES_CLAIM)
            .and_then(Value::as_array)
            .map(|a| a.iter().filter_map(Value::as_str).map(str::to_string).collect())
            .unwrap_or_default();

        let issued_at = Utc
            .timestamp_opt(iat, 0)
            .single()
            .ok_or_else(|| LaunchError::Malformed("iat out of range".into()))?;
        // Age is checked exactly; skew only forgives a platform clock that
        // runs ahead of ours.
        if now - issued_at > self.max_age || issued_at - now > self.clock_skew {
            return Err(LaunchError::Expired);
        }

        let expires = issued_at + self.max_age + self.clock_skew;
        if !self.nonces.insert_if_absent(&nonce, expires, now) {
            return Err(LaunchError::ReplayedNonce);
        }

        Ok(LaunchContext {
            user_id,
            display_name,
            course_id,
            roles,
            issued_at,
            nonce,
        })
    }
}

fn decode_json(segment: &str) -> Result<Value, LaunchError> {
    let bytes = URL_SAFE_NO_PAD
        .decode(segment)
        .map_err(|e| LaunchError::Malformed(e.to_string()))?;
    serde_json::from_slice(&bytes).map_err(|e| LaunchError::Malformed(e.to_string()))
}

fn string_claim(claims: &Value, name: &str) -> Result<String, LaunchError> {
    claims
        .get(name)
        .and_then(Value::as_str)
        .filter(|s| !s.is_empty())
        .map(str::to_string)
        .ok_or_else(|| LaunchError::MissingClaim(name.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t0() -> DateTime<Utc> {
        DateTime::parse_from_rfc3339("2024-10-09T10:00:00Z").unwrap().with_timezone(&Utc)
    }

    fn setup() -> (PlatformSigner, LaunchValidator) {
        let signer = PlatformSigner::from_seed([7; 32]);
        let validator = LaunchValidator::new(signer.verifying_key());
        (signer, validator)
    }

    #[test]
    fn fresh_launch_maps_claims() {
        let (signer, validator) = setup();
        let token = signer.sign(&LaunchClaims::learner("u1", "Alice", "c1", t0(), "n-1"));
        let ctx = validator.validate(&token, t0() + Duration::seconds(10)).unwrap();
        assert_eq!(ctx.display_name, "Alice");
        assert_eq!(ctx.user_id, "u1");
        assert_eq!(ctx.course_id, "c1");
        assert_eq!(ctx.nonce, "n-1");
        assert!(ctx.roles.iter().any(|r| r.ends_with("#Learner")));
    }

    #[test]
    fn replay_is_rejected() {
        let (signer, validator) = setup();
        let token = signer.sign(&LaunchClaims::learner("u1", "Alice", "c1", t0(), "n-1"));
        validator.validate(&token, t0()).unwrap();
        assert_eq!(validator.validate(&token, t0() + Duration::seconds(1)), Err(LaunchError::ReplayedNonce));
    }

    #[test]
    fn age_boundary_is_exact() {
        // 300 s accepted, 301 s rejected, and 400 s rejected.
        for (age, ok) in [(300, true), (301, false), (400, false), (0, true)] {
            let (signer, validator) = setup();
            let token = signer.sign(&LaunchClaims::learner("u1", "A", "c1", t0(), "n"));
            let res = validator.validate(&token, t0() + Duration::seconds(age));
            assert_eq!(res.is_ok(), ok, "age {age}");
            if !ok {
                assert_eq!(res, Err(LaunchError::Expired));
            }
        }
    }

    #[test]
    fn future_issue_time_respects_skew() {
        let (signer, validator) = setup();
        let token = signer.sign(&LaunchClaims::learner("u1", "A", "c1", t0(), "a"));
        assert!(validator.validate(&token, t0() - Duration::seconds(30)).is_ok());
        let token = signer.sign(&LaunchClaims::learner("u1", "A", "c1", t0(), "b"));
        assert_eq!(validator.validate(&token, t0() - Duration::seconds(31)), Err(LaunchError::Expired));
    }

    #[test]
    fn foreign_key_is_bad_signature() {
        let (_, validator) = setup();
        let other = PlatformSigner::from_seed([9; 32]);
        let token = other.sign(&LaunchClaims::learner("u1", "A", "c1", t0(), "n"));
        assert_eq!(validator.validate(&token, t0()), Err(LaunchError::BadSignature));
    }

    #[test]
    fn missing_claim_is_named() {
        let (signer, validator) = setup();
        let payload = format!(
            r#"{{"sub":"u1","iat":{},"nonce":"n","{CONTEXT_CLAIM}":{{"id":"c1"}}}}"#,
            t0().timestamp()
        );
        let token = signer.sign_payload(&payload);
        assert_eq!(validator.validate(&token, t0()), Err(LaunchError::MissingClaim("name".into())));
    }

    #[test]
    fn rejected_launch_does_not_burn_nonce() {
        let (signer, validator) = setup();
        let token = signer.sign(&LaunchClaims::learner("u1", "A", "c1", t0(), "n"));
        assert_eq!(validator.validate(&token, t0() + Duration::seconds(301)), Err(LaunchError::Expired));
        assert!(validator.nonces.is_empty());
    }

    #[test]
    fn nonce_expires_after_window() {
        let reg = NonceRegistry::default();
        assert!(reg.insert_if_absent("n", t0() + Duration::seconds(330), t0()));
        assert!(!reg.insert_if_absent("n", t0() + Duration::seconds(660), t0() + Duration::seconds(329)));
        assert!(reg.insert_if_absent("n", t0() + Duration::seconds(660), t0() + Duration::seconds(330)));
    }

    #[test]
    fn public_key_round_trips_through_base64() {
        let signer = PlatformSigner::from_seed([3; 32]);
        let validator = LaunchValidator::from_public_key_b64(&signer.public_key_b64()).unwrap();
        let token = signer.sign(&LaunchClaims::learner("u", "B", "c", t0(), "n"));
        assert!(validator.validate(&token, t0()).is_ok());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn any_single_byte_change_is_rejected(pos in 0usize..10_000, delta in 1u8..=255) {
            let (signer, validator) = setup();
            let token = signer.sign(&LaunchClaims::learner("u1", "Alice", "c1", t0(), "n-1"));
            let mut bytes = token.clone().into_bytes();
            let idx = pos % bytes.len();
            bytes[idx] = bytes[idx].wrapping_add(delta);
            let tampered = String::from_utf8_lossy(&bytes).into_owned();
            prop_assume!(tampered != token);
            prop_assert!(validator.validate(&tampered, t0()).is_err());
        }
    }
}
