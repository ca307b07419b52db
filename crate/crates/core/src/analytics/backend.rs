use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::records::{RatingRecord, SessionRecord, Snapshot, TurnRecord, UserRecord};
use super::AnalyticsError;

/// One upsert in the document log.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "collection", content = "record", rename_all = "snake_case")]
pub enum LogEntry {
    User(UserRecord),
    Session(SessionRecord),
    Turn(TurnRecord),
    Rating(RatingRecord),
}

impl LogEntry {
    pub fn from_snapshot(s: &Snapshot) -> Vec<LogEntry> {
        s.users
            .iter()
            .cloned()
            .map(LogEntry::User)
            .chain(s.sessions.iter().cloned().map(LogEntry::Session))
            .chain(s.turns.iter().cloned().map(LogEntry::Turn))
            .chain(s.ratings.iter().cloned().map(LogEntry::Rating))
            .collect()
    }
}

/// Durable side of the document store.
pub trait StoreBackend: Send + Sync {
    fn load(&self) -> Result<Vec<LogEntry>, AnalyticsError>;
    fn append(&self, entries: &[LogEntry]) -> Result<(), AnalyticsError>;
    /// Replace the whole log with a compacted copy.
    fn rewrite(&self, entries: &[LogEntry]) -> Result<(), AnalyticsError>;
    fn describe(&self) -> String;
}

#[derive(Debug, Default)]
pub struct MemoryBackend;

impl StoreBackend for MemoryBackend {
    fn load(&self) -> Result<Vec<LogEntry>, AnalyticsError> {
        Ok(Vec::new())
    }

    fn append(&self, _: &[LogEntry]) -> Result<(), AnalyticsError> {
        Ok(())
    }

    fn rewrite(&self, _: &[LogEntry]) -> Result<(), AnalyticsError> {
        Ok(())
    }

    fn describe(&self) -> String {
        "memory".into()
    }
}

/// JSON-lines append log. A torn final line (crash mid-write) is ignored on
/// load; a bad line anywhere else is corruption.
#[derive(Debug)]
pub struct AppendLogBackend {
    path: PathBuf,
    file: Mutex<Option<File>>,
}

fn io_err(path: &Path, e: std::io::Error) -> AnalyticsError {
    AnalyticsError::Io(format!("{}: {e}", path.display()))
}

impl AppendLogBackend {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        Self {
            path: path.into(),
            file: Mutex::new(None),
        }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    fn encode(entries: &[LogEntry]) -> String {
        let mut buf = String::new();
        for e in entries {
            buf.push_str(&serde_json::to_string(e).expect("log entries serialize"));
            buf.push('\n');
        }
        buf
    }
}

impl StoreBackend for AppendLogBackend {
    fn load(&self) -> Result<Vec<LogEntry>, AnalyticsError> {
        let file = match File::open(&self.path) {
            Ok(f) => f,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(io_err(&self.path, e)),
        };
        let lines: Vec<String> = BufReader::new(file)
            .lines()
            .collect::<Result<_, _>>()
            .map_err(|e| io_err(&self.path, e))?;
        let last = lines.iter().rposition(|l| !l.trim().is_empty());
        let mut entries = Vec::with_capacity(lines.len());
        for (i, line) in lines.iter().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str(line) {
                Ok(e) => entries.push(e),
                Err(_) if Some(i) == last && !line.ends_with('}') => {
                    tracing::warn!(path = %self.path.display(), line = i + 1, "ignoring torn final log line");
                }
                Err(e) => {
                    return Err(AnalyticsError::Corrupt {
                        line: i + 1,
                        message: e.to_string(),
                    })
                }
            }
        }
        Ok(entries)
    }

    fn append(&self, entries: &[LogEntry]) -> Result<(), AnalyticsError> {
        if entries.is_empty() {
            return Ok(());
        }
        let mut slot = self.file.lock().expect("log file lock poisoned");
        if slot.is_none() {
            if let Some(dir) = self.path.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
            }
            let f = OpenOptions::new()
                .create(true)
                .append(true)
                .open(&self.path)
                .map_err(|e| io_err(&self.path, e))?;
            *slot = Some(f);
        }
        let f = slot.as_mut().expect("opened above");
        f.write_all(Self::encode(entries).as_bytes())
            .and_then(|_| f.flush())
            .map_err(|e| io_err(&self.path, e))
    }

    fn rewrite(&self, entries: &[LogEntry]) -> Result<(), AnalyticsError> {
        let mut slot = self.file.lock().expect("log file lock poisoned");
        let tmp = self.path.with_extension("compact.tmp");
        {
            let mut f = File::create(&tmp).map_err(|e| io_err(&tmp, e))?;
            f.write_all(Self::encode(entries).as_bytes())
                .and_then(|_| f.sync_all())
                .map_err(|e| io_err(&tmp, e))?;
        }
        std::fs::rename(&tmp, &self.path).map_err(|e| io_err(&self.path, e))?;
        *slot = None;
        Ok(())
    }

    fn describe(&self) -> String {
        format!("append-log {}", self.path.display())
    }
}
