use std::fmt::Write;
use std::path::Path;

use dcci_core::analytics::{AnalyticsStore, AppendLogBackend, UsageReport};
use dcci_core::dcci::KbRegistry;

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum ReportFormat {
    Text,
    Csv,
}

#[derive(Debug, thiserror::Error)]
#[error("store: {0}")]
pub struct StoreError(pub String);

pub fn render_usage(u: &UsageReport) -> String {
    let mut out = String::new();
    writeln!(out, "Total queries: {}", u.total_queries).unwrap();
    writeln!(out, "Sessions: {}", u.session_count).unwrap();
    writeln!(out, "Unique users: {}", u.unique_users).unwrap();
    match u.mean_session_minutes {
        Some(m) => writeln!(out, "Mean session minutes: {m:.2}").unwrap(),
        None => writeln!(out, "Mean session minutes: -").unwrap(),
    }
    for (kb, n) in &u.per_kb_counts {
        writeln!(out, "  {kb}: {n}").unwrap();
    }
    out
}

/// Opens an existing store log with the standard knowledge-base names.
pub fn open_store(path: &Path) -> Result<AnalyticsStore, StoreError> {
    if !path.is_file() {
        return Err(StoreError(format!("{} does not exist", path.display())));
    }
    let kbs = KbRegistry::standard("report")
        .iter()
        .map(|kb| (kb.kb_id.clone(), kb.display_name.clone()))
        .collect();
    AnalyticsStore::open(Box::new(AppendLogBackend::new(path)), kbs).map_err(|e| StoreError(e.to_string()))
}

pub fn render_report(path: &Path, format: ReportFormat) -> Result<String, StoreError> {
    let report = open_store(path)?.rating_report();
    Ok(match format {
        ReportFormat::Text => report.render_text(),
        ReportFormat::Csv => report.render_csv(),
    })
}
