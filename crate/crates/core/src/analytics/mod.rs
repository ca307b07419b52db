//! Session, turn and rating persistence plus the rating and usage
//! aggregations.

mod aggregate;
mod backend;
mod records;
mod report;
mod store;

pub use aggregate::{aggregate_ratings, round2, KbFilter, RatingAggregate, UsageReport, ALL_KBS};
pub use backend::{AppendLogBackend, LogEntry, MemoryBackend, StoreBackend};
pub use records::{RatingRecord, SessionRecord, Snapshot, TimeRange, TurnRecord, UserRecord};
pub use report::{RatingReport, REPORT_CSV_HEADER};
pub use store::{AnalyticsStore, IdMode, MaintenanceGuard, NewTurn, DEFAULT_COMPACT_EVERY, DEFAULT_IDLE_TIMEOUT_MINUTES};

use hmac::{Hmac, Mac};
use sha2::Sha256;

#[derive(Debug, thiserror::Error, Clone, PartialEq, Eq)]
pub enum AnalyticsError {
    #[error("pseudonym salt is not configured")]
    MissingSalt,
    #[error("unknown or closed session {0}")]
    UnknownSession(String),
    #[error("session {0} is already closed")]
    AlreadyClosed(String),
    #[error("unknown knowledge base {0}")]
    UnknownKb(String),
    #[error("unknown turn {0}")]
    UnknownTurn(String),
    #[error("rating {0} is outside 1..=5")]
    OutOfRange(i64),
    #[error("store unavailable: {0}")]
    Io(String),
    #[error("store log line {line}: {message}")]
    Corrupt { line: usize, message: String },
}

/// Keyed one-way user pseudonym: hex HMAC-SHA256 of the user id.
pub fn pseudonymize(user_id: &str, salt: &str) -> Result<String, AnalyticsError> {
    if salt.is_empty() {
        return Err(AnalyticsError::MissingSalt);
    }
    let mut mac = Hmac::<Sha256>::new_from_slice(salt.as_bytes()).expect("hmac accepts any key length");
    mac.update(user_id.as_bytes());
    Ok(hex::encode(mac.finalize().into_bytes()))
}
