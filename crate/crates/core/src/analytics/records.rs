use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserRecord {
    pub user_pseudonym: String,
    pub first_seen: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionRecord {
    pub session_id: String,
    pub user_pseudonym: String,
    pub started_at: DateTime<Utc>,
    #[serde(default)]
    pub ended_at: Option<DateTime<Utc>>,
    pub last_activity_at: DateTime<Utc>,
}

impl SessionRecord {
    pub fn is_open(&self) -> bool {
        self.ended_at.is_none()
    }

    pub fn duration_minutes(&self) -> Option<f64> {
        self.ended_at
            .map(|end| (end - self.started_at).num_milliseconds() as f64 / 60_000.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TurnRecord {
    pub turn_id: String,
    pub session_id: String,
    pub kb_id: String,
    pub query: String,
    pub response: String,
    pub provider_id: String,
    pub fallback_used: bool,
    #[serde(default)]
    pub rating: Option<u8>,
    pub created_at: DateTime<Utc>,
    pub latency_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RatingRecord {
    pub turn_id: String,
    pub session_id: String,
    pub kb_id: String,
    pub rating: u8,
    pub rated_at: DateTime<Utc>,
}

/// Half-open `[start, end)`; a missing bound is unbounded.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimeRange {
    pub start: Option<DateTime<Utc>>,
    pub end: Option<DateTime<Utc>>,
}

impl TimeRange {
    pub const ALL: TimeRange = TimeRange { start: None, end: None };

    pub fn contains(&self, t: DateTime<Utc>) -> bool {
        self.start.is_none_or(|s| t >= s) && self.end.is_none_or(|e| t < e)
    }
}

/// Every persisted collection, each sorted by its key.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Snapshot {
    pub users: Vec<UserRecord>,
    pub sessions: Vec<SessionRecord>,
    pub turns: Vec<TurnRecord>,
    pub ratings: Vec<RatingRecord>,
}

impl Snapshot {
    pub const COLLECTIONS: [&'static str; 4] = ["users", "sessions", "turns", "ratings"];

    pub fn export_jsonl(&self, dir: &std::path::Path) -> std::io::Result<()> {
        std::fs::create_dir_all(dir)?;
        write_jsonl(&dir.join("users.jsonl"), &self.users)?;
        write_jsonl(&dir.join("sessions.jsonl"), &self.sessions)?;
        write_jsonl(&dir.join("turns.jsonl"), &self.turns)?;
        write_jsonl(&dir.join("ratings.jsonl"), &self.ratings)
    }

    pub fn import_jsonl(dir: &std::path::Path) -> std::io::Result<Self> {
        Ok(Self {
            users: read_jsonl(&dir.join("users.jsonl"))?,
            sessions: read_jsonl(&dir.join("sessions.jsonl"))?,
            turns: read_jsonl(&dir.join("turns.jsonl"))?,
            ratings: read_jsonl(&dir.join("ratings.jsonl"))?,
        })
    }
}

fn write_jsonl<T: Serialize>(path: &std::path::Path, records: &[T]) -> std::io::Result<()> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).map_err(std::io::Error::other)?);
        out.push('\n');
    }
    std::fs::write(path, out)
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &std::path::Path) -> std::io::Result<Vec<T>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| {
                std::io::Error::new(std::io::ErrorKind::InvalidData, format!("{}:{}: {e}", path.display(), i + 1))
            })
        })
        .collect()
}
