//! Sliding-window quota tracking at one-second resolution.
//!
//! Requests and tokens are counted over the trailing 60 s, i.e. an event
//! stamped at second `s` occupies the window until second `s + 60`.
//! Requests per day are counted per UTC calendar day.

use std::collections::{HashMap, VecDeque};
use std::sync::Mutex;
use std::time::Duration;

use chrono::{DateTime, NaiveDate, Utc};
use serde::{Deserialize, Serialize};

use super::profile::{Limit, ProviderProfile};

pub const WINDOW_SECS: i64 = 60;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeferReason {
    RequestsPerMinute,
    TokensPerMinute,
    RequestsPerDay,
    /// The request alone is larger than the per-minute token quota.
    RequestTooLarge,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Admission {
    Admit,
    Defer { retry_after: Duration, reason: DeferReason },
}

impl Admission {
    pub fn is_admit(&self) -> bool {
        matches!(self, Admission::Admit)
    }
}

#[derive(Debug, Clone, Copy)]
struct Quotas {
    rpm: Limit,
    tpm: Limit,
    rpd: Limit,
}

#[derive(Debug, Default)]
struct ProviderWindow {
    /// (unix second, tokens), oldest first.
    events: VecDeque<(i64, u64)>,
    token_sum: u64,
    day: Option<NaiveDate>,
    day_count: u64,
}

impl ProviderWindow {
    fn prune(&mut self, now_sec: i64) {
        while let Some(&(sec, tokens)) = self.events.front() {
            if sec + WINDOW_SECS <= now_sec {
                self.events.pop_front();
                self.token_sum -= tokens;
            } else {
                break;
            }
        }
    }
}

#[derive(Default)]
pub struct SlidingWindowLimiter {
    quotas: HashMap<String, Quotas>,
    windows: Mutex<HashMap<String, ProviderWindow>>,
}

impl SlidingWindowLimiter {
    pub fn new<'a>(profiles: impl IntoIterator<Item = &'a ProviderProfile>) -> Self {
        let quotas = profiles
            .into_iter()
            .map(|p| {
                (
                    p.provider_id.clone(),
                    Quotas {
                        rpm: p.rpm_limit,
                        tpm: p.tpm_limit,
                        rpd: p.rpd_limit,
                    },
                )
            })
            .collect();
        Self {
            quotas,
            windows: Mutex::new(HashMap::new()),
        }
    }

    /// Admit and record the request, or report when it could next succeed
    /// without recording anything. Unknown providers are admitted.
    pub fn acquire_slot(&self, provider_id: &str, tokens: u64, now: DateTime<Utc>) -> Admission {
        let Some(q) = self.quotas.get(provider_id).copied() else {
            return Admission::Admit;
        };
        let now_sec = now.timestamp();
        let today = now.date_naive();

        let mut windows = self.windows.lock().expect("limiter state poisoned");
        let w = windows.entry(provider_id.to_string()).or_default();
        w.prune(now_sec);
        if w.day != Some(today) {
            w.day = Some(today);
            w.day_count = 0;
        }

        let mut wait: Option<(i64, DeferReason)> = None;
        let mut block = |secs: i64, reason: DeferReason| {
            if wait.is_none_or(|(w, _)| secs > w) {
                wait = Some((secs, reason));
            }
        };

        if let Limit::Max(rpd) = q.rpd {
            if w.day_count >= rpd {
                let midnight = today
                    .succ_opt()
                    .expect("date in range")
                    .and_hms_opt(0, 0, 0)
                    .expect("midnight exists")
                    .and_utc();
                block((midnight.timestamp() - now_sec).max(1), DeferReason::RequestsPerDay);
            }
        }

        if let Limit::Max(rpm) = q.rpm {
            let len = w.events.len() as u64;
            if len >= rpm {
                // Oldest event whose expiry brings the count under the limit.
                let idx = (len - rpm) as usize;
                block(w.events[idx].0 + WINDOW_SECS - now_sec, DeferReason::RequestsPerMinute);
            }
        }

        if let Limit::Max(tpm) = q.tpm {
            if tokens > tpm {
                block(WINDOW_SECS, DeferReason::RequestTooLarge);
            } else if w.token_sum + tokens > tpm {
                let mut remaining = w.token_sum;
                for &(sec, t) in &w.events {
                    remaining -= t;
                    if remaining + tokens <= tpm {
                        block(sec + WINDOW_SECS - now_sec, DeferReason::TokensPerMinute);
                        break;
                    }
                }
            }
        }

        match wait {
            Some((secs, reason)) => Admission::Defer {
                retry_after: Duration::from_secs(secs.max(1) as u64),
                reason,
            },
            None => {
                w.events.push_back((now_sec, tokens));
                w.token_sum += tokens;
                w.day_count += 1;
                Admission::Admit
            }
        }
    }
}
