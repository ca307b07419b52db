use std::collections::{BTreeMap, BTreeSet};
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, RwLock};

use chrono::{DateTime, Duration, Utc};

use super::aggregate::{aggregate_ratings, KbFilter, RatingAggregate, UsageReport};
use super::backend::{LogEntry, MemoryBackend, StoreBackend};
use super::records::{RatingRecord, SessionRecord, Snapshot, TimeRange, TurnRecord, UserRecord};
use super::report::RatingReport;
use super::AnalyticsError;

pub const DEFAULT_IDLE_TIMEOUT_MINUTES: i64 = 30;
/// Appends between automatic compactions of a file-backed log.
pub const DEFAULT_COMPACT_EVERY: usize = 10_000;

#[derive(Debug)]
pub enum IdMode {
    Random,
    /// `s000001`, `t000001`, ...: reproducible ids for replay runs.
    Sequential { sessions: AtomicU64, turns: AtomicU64 },
}

impl IdMode {
    pub fn sequential() -> Self {
        IdMode::Sequential {
            sessions: AtomicU64::new(0),
            turns: AtomicU64::new(0),
        }
    }
}

/// Fields of a turn supplied by the chat pipeline.
#[derive(Debug, Clone)]
pub struct NewTurn<'a> {
    pub session_id: &'a str,
    pub kb_id: &'a str,
    pub query: &'a str,
    pub response: &'a str,
    pub provider_id: &'a str,
    pub fallback_used: bool,
    pub latency_ms: u64,
}

#[derive(Debug, Default)]
struct State {
    users: BTreeMap<String, UserRecord>,
    sessions: BTreeMap<String, SessionRecord>,
    turns: BTreeMap<String, TurnRecord>,
    ratings: BTreeMap<String, RatingRecord>,
}

impl State {
    fn apply(&mut self, entry: LogEntry) {
        match entry {
            LogEntry::User(u) => {
                self.users.insert(u.user_pseudonym.clone(), u);
            }
            LogEntry::Session(s) => {
                self.sessions.insert(s.session_id.clone(), s);
            }
            LogEntry::Turn(t) => {
                self.turns.insert(t.turn_id.clone(), t);
            }
            LogEntry::Rating(r) => {
                if let Some(t) = self.turns.get_mut(&r.turn_id) {
                    t.rating = Some(r.rating);
                }
                self.ratings.insert(r.turn_id.clone(), r);
            }
        }
    }

    fn snapshot(&self) -> Snapshot {
        Snapshot {
            users: self.users.values().cloned().collect(),
            sessions: self.sessions.values().cloned().collect(),
            turns: self.turns.values().cloned().collect(),
            ratings: self.ratings.values().cloned().collect(),
        }
    }
}

/// Clears the maintenance flag when dropped.
pub struct MaintenanceGuard {
    flag: Arc<AtomicBool>,
}

impl Drop for MaintenanceGuard {
    fn drop(&mut self) {
        self.flag.store(false, Ordering::Release);
    }
}

/// Document store for users, sessions, turns and ratings. Writes go to the
/// in-memory state and the backend under one lock, so each operation is
/// atomic and readers always see a consistent snapshot.
pub struct AnalyticsStore {
    state: RwLock<State>,
    backend: Box<dyn StoreBackend>,
    kbs: Vec<(String, String)>,
    idle_timeout: Duration,
    ids: IdMode,
    maintenance: Arc<AtomicBool>,
    appends_since_compact: AtomicUsize,
    compact_every: usize,
}

impl AnalyticsStore {
    /// `kbs` lists `(kb_id, display_name)` in report order.
    pub fn open(backend: Box<dyn StoreBackend>, kbs: Vec<(String, String)>) -> Result<Self, AnalyticsError> {
        let mut state = State::default();
        for entry in backend.load()? {
            state.apply(entry);
        }
        Ok(Self {
            state: RwLock::new(state),
            backend,
            kbs,
            idle_timeout: Duration::minutes(DEFAULT_IDLE_TIMEOUT_MINUTES),
            ids: IdMode::Random,
            maintenance: Arc::new(AtomicBool::new(false)),
            appends_since_compact: AtomicUsize::new(0),
            compact_every: DEFAULT_COMPACT_EVERY,
        })
    }

    pub fn in_memory(kbs: Vec<(String, String)>) -> Self {
        Self::open(Box::new(MemoryBackend), kbs).expect("memory backend never fails")
    }

    pub fn idle_timeout(mut self, timeout: Duration) -> Self {
        self.idle_timeout = timeout;
        self
    }

    pub fn compact_every(mut self, appends: usize) -> Self {
        self.compact_every = appends.max(1);
        self
    }

    pub fn with_ids(mut self, ids: IdMode) -> Self {
        if let IdMode::Sequential { sessions, turns } = &ids {
            let st = self.read();
            sessions.store(st.sessions.len() as u64, Ordering::SeqCst);
            turns.store(st.turns.len() as u64, Ordering::SeqCst);
        }
        self.ids = ids;
        self
    }

    pub fn knowledge_bases(&self) -> &[(String, String)] {
        &self.kbs
    }

    pub fn backend_description(&self) -> String {
        self.backend.describe()
    }

    fn read(&self) -> std::sync::RwLockReadGuard<'_, State> {
        self.state.read().expect("store lock poisoned")
    }

    fn next_id(&self, prefix: char) -> String {
        match &self.ids {
            IdMode::Random => format!("{prefix}-{}", uuid::Uuid::new_v4()),
            IdMode::Sequential { sessions, turns } => {
                let counter = if prefix == 's' { sessions } else { turns };
                format!("{prefix}{:06}", counter.fetch_add(1, Ordering::SeqCst) + 1)
            }
        }
    }

    /// Persist `entries` and apply them to `state`. Called with the write lock held.
    fn commit(&self, state: &mut State, entries: Vec<LogEntry>) -> Result<(), AnalyticsError> {
        self.backend.append(&entries)?;
        let n = entries.len();
        for e in entries {
            state.apply(e);
        }
        if self.appends_since_compact.fetch_add(n, Ordering::AcqRel) + n >= self.compact_every {
            self.compact_locked(state)?;
        }
        Ok(())
    }

    fn compact_locked(&self, state: &State) -> Result<(), AnalyticsError> {
        let _guard = self.lock_for_maintenance();
        self.backend.rewrite(&LogEntry::from_snapshot(&state.snapshot()))?;
        self.appends_since_compact.store(0, Ordering::Release);
        Ok(())
    }

    pub fn compact(&self) -> Result<(), AnalyticsError> {
        let state = self.state.write().expect("store lock poisoned");
        self.compact_locked(&state)
    }

    /// Marks the store as under maintenance until the guard is dropped.
    pub fn lock_for_maintenance(&self) -> MaintenanceGuard {
        self.maintenance.store(true, Ordering::Release);
        MaintenanceGuard {
            flag: self.maintenance.clone(),
        }
    }

    pub fn is_available(&self) -> bool {
        !self.maintenance.load(Ordering::Acquire)
    }

    pub fn open_session(&self, user_pseudonym: &str, now: DateTime<Utc>) -> Result<String, AnalyticsError> {
        let mut st = self.state.write().expect("store lock poisoned");
        let session_id = self.next_id('s');
        let mut entries = Vec::with_capacity(2);
        if !st.users.contains_key(user_pseudonym) {
            entries.push(LogEntry::User(UserRecord {
                user_pseudonym: user_pseudonym.to_string(),
                first_seen: now,
            }));
        }
        entries.push(LogEntry::Session(SessionRecord {
            session_id: session_id.clone(),
            user_pseudonym: user_pseudonym.to_string(),
            started_at: now,
            ended_at: None,
            last_activity_at: now,
        }));
        self.commit(&mut st, entries)?;
        Ok(session_id)
    }

    pub fn close_session(&self, session_id: &str, now: DateTime<Utc>) -> Result<(), AnalyticsError> {
        let mut st = self.state.write().expect("store lock poisoned");
        let session = st
            .sessions
            .get(session_id)
            .ok_or_else(|| AnalyticsError::UnknownSession(session_id.to_string()))?;
        if !session.is_open() {
            return Err(AnalyticsError::AlreadyClosed(session_id.to_string()));
        }
        let mut closed = session.clone();
        closed.ended_at = Some(now.max(closed.started_at));
        closed.last_activity_at = closed.last_activity_at.max(now);
        self.commit(&mut st, vec![LogEntry::Session(closed)])
    }

    /// Closes every open session idle for at least the timeout, ending it at
    /// its last activity. Returns the closed ids.
    pub fn sweep_idle(&self, now: DateTime<Utc>) -> Result<Vec<String>, AnalyticsError> {
        let mut st = self.state.write().expect("store lock poisoned");
        let closed: Vec<SessionRecord> = st
            .sessions
            .values()
            .filter(|s| s.is_open() && now - s.last_activity_at >= self.idle_timeout)
            .map(|s| SessionRecord {
                ended_at: Some(s.last_activity_at),
                ..s.clone()
            })
            .collect();
        let ids = closed.iter().map(|s| s.session_id.clone()).collect();
        self.commit(&mut st, closed.into_iter().map(LogEntry::Session).collect())?;
        Ok(ids)
    }

    pub fn record_turn(&self, turn: NewTurn<'_>, now: DateTime<Utc>) -> Result<String, AnalyticsError> {
        if !self.kbs.iter().any(|(id, _)| id == turn.kb_id) {
            return Err(AnalyticsError::UnknownKb(turn.kb_id.to_string()));
        }
        let mut st = self.state.write().expect("store lock poisoned");
        let session = st
            .sessions
            .get(turn.session_id)
            .filter(|s| s.is_open())
            .ok_or_else(|| AnalyticsError::UnknownSession(turn.session_id.to_string()))?;
        let mut touched = session.clone();
        touched.last_activity_at = touched.last_activity_at.max(now);
        let turn_id = self.next_id('t');
        let record = TurnRecord {
            turn_id: turn_id.clone(),
            session_id: turn.session_id.to_string(),
            kb_id: turn.kb_id.to_string(),
            query: turn.query.to_string(),
            response: turn.response.to_string(),
            provider_id: turn.provider_id.to_string(),
            fallback_used: turn.fallback_used,
            rating: None,
            created_at: now,
            latency_ms: turn.latency_ms,
        };
        self.commit(&mut st, vec![LogEntry::Turn(record), LogEntry::Session(touched)])?;
        Ok(turn_id)
    }

    /// Last write wins; re-rating with the current value writes nothing.
    pub fn rate_turn(&self, turn_id: &str, rating: i64, now: DateTime<Utc>) -> Result<(), AnalyticsError> {
        if !(1..=5).contains(&rating) {
            return Err(AnalyticsError::OutOfRange(rating));
        }
        let rating = rating as u8;
        let mut st = self.state.write().expect("store lock poisoned");
        let turn = st
            .turns
            .get(turn_id)
            .ok_or_else(|| AnalyticsError::UnknownTurn(turn_id.to_string()))?;
        if turn.rating == Some(rating) {
            return Ok(());
        }
        let record = RatingRecord {
            turn_id: turn.turn_id.clone(),
            session_id: turn.session_id.clone(),
            kb_id: turn.kb_id.clone(),
            rating,
            rated_at: now,
        };
        self.commit(&mut st, vec![LogEntry::Rating(record)])
    }

    pub fn session(&self, session_id: &str) -> Option<SessionRecord> {
        self.read().sessions.get(session_id).cloned()
    }

    pub fn turn(&self, turn_id: &str) -> Option<TurnRecord> {
        self.read().turns.get(turn_id).cloned()
    }

    /// Turns of one session in `created_at` order.
    pub fn session_turns(&self, session_id: &str) -> Vec<TurnRecord> {
        let mut turns: Vec<_> = self
            .read()
            .turns
            .values()
            .filter(|t| t.session_id == session_id)
            .cloned()
            .collect();
        turns.sort_by(|a, b| a.created_at.cmp(&b.created_at).then_with(|| a.turn_id.cmp(&b.turn_id)));
        turns
    }

    pub fn snapshot(&self) -> Snapshot {
        self.read().snapshot()
    }

    /// Replace the contents with `snapshot` (for imports).
    pub fn restore(&self, snapshot: Snapshot) -> Result<(), AnalyticsError> {
        let mut st = self.state.write().expect("store lock poisoned");
        let entries = LogEntry::from_snapshot(&snapshot);
        self.backend.rewrite(&entries)?;
        *st = State::default();
        for e in entries {
            st.apply(e);
        }
        Ok(())
    }

    pub fn aggregate_ratings(&self, filter: &KbFilter) -> RatingAggregate {
        let st = self.read();
        let rated = st.turns.values().filter_map(|t| t.rating.map(|r| (t.kb_id.as_str(), r)));
        let kb_ids: Vec<&str> = self.kbs.iter().map(|(id, _)| id.as_str()).collect();
        aggregate_ratings(rated, filter, &kb_ids)
    }

    pub fn rating_report(&self) -> RatingReport {
        self.rating_report_in(TimeRange::ALL)
    }

    /// Report over turns created within `range`.
    pub fn rating_report_in(&self, range: TimeRange) -> RatingReport {
        let st = self.read();
        let rated: Vec<(&str, u8)> = st
            .turns
            .values()
            .filter(|t| range.contains(t.created_at))
            .filter_map(|t| t.rating.map(|r| (t.kb_id.as_str(), r)))
            .collect();
        RatingReport::build(&rated, &self.kbs)
    }

    pub fn usage_report(&self, range: TimeRange) -> UsageReport {
        let st = self.read();
        let mut per_kb_counts: BTreeMap<String, u64> = BTreeMap::new();
        for t in st.turns.values().filter(|t| range.contains(t.created_at)) {
            *per_kb_counts.entry(t.kb_id.clone()).or_default() += 1;
        }
        let sessions: Vec<&SessionRecord> = st.sessions.values().filter(|s| range.contains(s.started_at)).collect();
        let users: BTreeSet<&str> = sessions.iter().map(|s| s.user_pseudonym.as_str()).collect();
        let durations: Vec<f64> = sessions.iter().filter_map(|s| s.duration_minutes()).collect();
        UsageReport {
            total_queries: per_kb_counts.values().sum(),
            per_kb_counts,
            session_count: sessions.len() as u64,
            unique_users: users.len() as u64,
            mean_session_minutes: (!durations.is_empty())
                .then(|| durations.iter().sum::<f64>() / durations.len() as f64),
        }
    }
}
