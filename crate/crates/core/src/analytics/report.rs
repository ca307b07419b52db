use std::fmt::Write;

use serde::{Deserialize, Serialize};

use super::aggregate::{aggregate_ratings, KbFilter, RatingAggregate};

pub const REPORT_CSV_HEADER: &str =
    "knowledge_base,n,rating_1_pct,rating_2_pct,rating_3_pct,rating_4_pct,rating_5_pct,average,total_average";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub display_name: String,
    #[serde(flatten)]
    pub aggregate: RatingAggregate,
}

/// Rating distribution per knowledge base plus the `ALL` row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatingReport {
    /// KBs with at least one rating, in registry order.
    pub rows: Vec<ReportRow>,
    pub all: RatingAggregate,
}

impl RatingReport {
    pub fn build(rated: &[(&str, u8)], kbs: &[(String, String)]) -> Self {
        let order: Vec<&str> = kbs.iter().map(|(id, _)| id.as_str()).collect();
        let mut ids: Vec<(String, String)> = kbs.to_vec();
        for (kb, _) in rated {
            if !ids.iter().any(|(id, _)| id == kb) {
                ids.push((kb.to_string(), kb.to_string()));
            }
        }
        let rows = ids
            .into_iter()
            .map(|(id, name)| ReportRow {
                aggregate: aggregate_ratings(rated.iter().copied(), &KbFilter::Kb(id), &order),
                display_name: name,
            })
            .filter(|r| r.aggregate.n > 0)
            .collect();
        Self {
            rows,
            all: aggregate_ratings(rated.iter().copied(), &KbFilter::All, &order),
        }
    }

    pub fn render_text(&self) -> String {
        let name_width = self
            .rows
            .iter()
            .map(|r| r.display_name.chars().count())
            .chain(["Knowledge Base".len()])
            .max()
            .unwrap_or(0);
        let mut out = format!("{:<name_width$}", "Knowledge Base");
        for r in 1..=5 {
            write!(out, "  {:>12}", format!("Rating {r} (%)")).unwrap();
        }
        writeln!(out, "  {:>7}", "Average").unwrap();
        for row in &self.rows {
            write!(out, "{:<name_width$}", row.display_name).unwrap();
            for pct in row.aggregate.percentages.values() {
                write!(out, "  {pct:>12.2}").unwrap();
            }
            writeln!(out, "  {:>7}", fmt_avg(row.aggregate.average, 3)).unwrap();
        }
        if let Some(total) = self.all.total_average {
            writeln!(out, "Total Average {total:.3}").unwrap();
        }
        out
    }

    pub fn render_csv(&self) -> String {
        let mut out = format!("{REPORT_CSV_HEADER}\n");
        if self.rows.is_empty() {
            return out;
        }
        for agg in self.rows.iter().map(|r| &r.aggregate).chain([&self.all]) {
            write!(out, "{},{}", csv_field(&agg.kb_id), agg.n).unwrap();
            for pct in agg.percentages.values() {
                write!(out, ",{pct:.2}").unwrap();
            }
            writeln!(out, ",{},{}", fmt_avg(agg.average, 4), fmt_avg(agg.total_average, 4)).unwrap();
        }
        out
    }
}

fn fmt_avg(avg: Option<f64>, places: usize) -> String {
    avg.map(|a| format!("{a:.places$}")).unwrap_or_default()
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}
