use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

pub const ALL_KBS: &str = "ALL";

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum KbFilter {
    All,
    Kb(String),
}

impl KbFilter {
    pub fn parse(s: &str) -> Self {
        if s == ALL_KBS {
            KbFilter::All
        } else {
            KbFilter::Kb(s.to_string())
        }
    }

    fn label(&self) -> &str {
        match self {
            KbFilter::All => ALL_KBS,
            KbFilter::Kb(id) => id,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatingAggregate {
    pub kb_id: String,
    pub n: u64,
    /// Count per rating value 1..=5 (every key present).
    pub counts: BTreeMap<u8, u64>,
    /// Percent per rating value, rounded to 2 decimals.
    pub percentages: BTreeMap<u8, f64>,
    /// Exact mean over rated turns; absent when `n == 0`. For `ALL` this is
    /// the turn-weighted mean.
    pub average: Option<f64>,
    /// `ALL` only: unweighted mean of the per-KB averages.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub total_average: Option<f64>,
}

pub fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

impl RatingAggregate {
    fn from_counts(kb_id: &str, counts: [u64; 5]) -> Self {
        let n: u64 = counts.iter().sum();
        let weighted: u64 = counts.iter().zip(1u64..).map(|(c, r)| c * r).sum();
        Self {
            kb_id: kb_id.to_string(),
            n,
            counts: (1u8..).zip(counts).collect(),
            percentages: (1u8..)
                .zip(counts)
                .map(|(r, c)| (r, if n == 0 { 0.0 } else { round2(c as f64 * 100.0 / n as f64) }))
                .collect(),
            average: (n > 0).then(|| weighted as f64 / n as f64),
            total_average: None,
        }
    }
}

/// Aggregates `(kb_id, rating)` pairs. `kb_order` fixes which KBs enter
/// `total_average` first; KBs outside it are still included when rated.
pub fn aggregate_ratings<'a>(
    rated: impl IntoIterator<Item = (&'a str, u8)>,
    filter: &KbFilter,
    kb_order: &[&str],
) -> RatingAggregate {
    let mut per_kb: BTreeMap<&str, [u64; 5]> = BTreeMap::new();
    let mut all = [0u64; 5];
    for (kb, r) in rated {
        if !(1..=5).contains(&r) {
            continue;
        }
        let slot = (r - 1) as usize;
        per_kb.entry(kb).or_default()[slot] += 1;
        all[slot] += 1;
    }
    match filter {
        KbFilter::Kb(id) => RatingAggregate::from_counts(id, per_kb.get(id.as_str()).copied().unwrap_or_default()),
        KbFilter::All => {
            let mut agg = RatingAggregate::from_counts(filter.label(), all);
            let mut seen = BTreeSet::new();
            let averages: Vec<f64> = kb_order
                .iter()
                .copied()
                .chain(per_kb.keys().copied())
                .filter(|kb| seen.insert(*kb))
                .filter_map(|kb| per_kb.get(kb))
                .filter_map(|c| RatingAggregate::from_counts("", *c).average)
                .collect();
            agg.total_average = (!averages.is_empty()).then(|| averages.iter().sum::<f64>() / averages.len() as f64);
            agg
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct UsageReport {
    pub total_queries: u64,
    pub per_kb_counts: BTreeMap<String, u64>,
    pub session_count: u64,
    pub unique_users: u64,
    /// Mean duration of closed sessions; absent when none are closed.
    pub mean_session_minutes: Option<f64>,
}
