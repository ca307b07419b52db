//! Curriculum Navigator documents: a JSON weekly schedule kept on an LMS page.
//!
//! ```json
//! {"course": "Programming 1",
//!  "weeks": [{"week": 1, "title": "Specifications", "start_date": "2024-10-01",
//!             "end_date": "2024-10-07", "topics": ["pre/postconditions"], "body": "..."}]}
//! ```

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::DcciError;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CurriculumWeek {
    pub week_index: u32,
    pub title: String,
    pub start_date: NaiveDate,
    pub end_date: NaiveDate,
    pub topics: Vec<String>,
    pub body: String,
}

impl CurriculumWeek {
    pub fn contains(&self, day: NaiveDate) -> bool {
        self.start_date <= day && day <= self.end_date
    }

    /// Plain-text rendering used as grounded context.
    pub fn to_context_text(&self) -> String {
        let mut out = format!(
            "Week {}: {}\nDates: {} to {}\n",
            self.week_index, self.title, self.start_date, self.end_date
        );
        if !self.topics.is_empty() {
            out.push_str("Topics:\n");
            for topic in &self.topics {
                out.push_str("- ");
                out.push_str(topic);
                out.push('\n');
            }
        }
        if !self.body.is_empty() {
            out.push('\n');
            out.push_str(&self.body);
        }
        out.trim_end().to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CurriculumDocument {
    pub course: String,
    pub weeks: Vec<CurriculumWeek>,
}

impl CurriculumDocument {
    pub fn parse(doc: &str) -> Result<Self, DcciError> {
        let root: Value = serde_json::from_str(doc)
            .map_err(|e| DcciError::SchemaError(format!("$: not valid JSON ({e})")))?;
        let obj = root
            .as_object()
            .ok_or_else(|| DcciError::SchemaError("$: expected an object".into()))?;
        let course = obj
            .get("course")
            .and_then(Value::as_str)
            .ok_or_else(|| DcciError::SchemaError("course".into()))?
            .to_string();
        let raw_weeks = obj
            .get("weeks")
            .and_then(Value::as_array)
            .ok_or_else(|| DcciError::SchemaError("weeks".into()))?;

        let mut weeks = Vec::with_capacity(raw_weeks.len());
        for (i, w) in raw_weeks.iter().enumerate() {
            weeks.push(parse_week(w, i)?);
        }

        let mut order: Vec<usize> = (0..weeks.len()).collect();
        order.sort_by_key(|&i| (weeks[i].start_date, weeks[i].end_date));
        for pair in order.windows(2) {
            let (a, b) = (&weeks[pair[0]], &weeks[pair[1]]);
            // Sharing a single boundary day is allowed; anything more overlaps.
            if b.start_date < a.end_date {
                return Err(DcciError::SchemaError(format!(
                    "weeks[{}].start_date overlaps weeks[{}]",
                    pair[1], pair[0]
                )));
            }
        }

        Ok(Self { course, weeks })
    }

    /// The week containing `today`; on a shared boundary day the week that
    /// starts later wins.
    pub fn active_week(&self, today: NaiveDate) -> Result<&CurriculumWeek, DcciError> {
        self.weeks
            .iter()
            .filter(|w| w.contains(today))
            .max_by_key(|w| w.start_date)
            .ok_or(DcciError::NoActiveWeek(today))
    }
}

pub fn parse_curriculum_navigator(doc: &str, today: NaiveDate) -> Result<CurriculumWeek, DcciError> {
    CurriculumDocument::parse(doc)?.active_week(today).cloned()
}

fn parse_week(w: &Value, i: usize) -> Result<CurriculumWeek, DcciError> {
    let field = |name: &str| format!("weeks[{i}].{name}");
    let obj = w
        .as_object()
        .ok_or_else(|| DcciError::SchemaError(format!("weeks[{i}]")))?;

    let week_index = obj
        .get("week")
        .and_then(Value::as_u64)
        .filter(|n| *n >= 1 && *n <= u64::from(u32::MAX))
        .ok_or_else(|| DcciError::SchemaError(field("week")))? as u32;
    let title = obj
        .get("title")
        .and_then(Value::as_str)
        .ok_or_else(|| DcciError::SchemaError(field("title")))?
        .to_string();
    let date = |name: &str| -> Result<NaiveDate, DcciError> {
        obj.get(name)
            .and_then(Value::as_str)
            .and_then(|s| NaiveDate::parse_from_str(s, "%Y-%m-%d").ok())
            .ok_or_else(|| DcciError::SchemaError(field(name)))
    };
    let start_date = date("start_date")?;
    let end_date = date("end_date")?;
    if start_date > end_date {
        return Err(DcciError::SchemaError(field("end_date")));
    }
    let topics = match obj.get("topics") {
        Some(Value::Array(items)) => items
            .iter()
            .map(|t| t.as_str().map(str::to_string))
            .collect::<Option<Vec<_>>>()
            .ok_or_else(|| DcciError::SchemaError(field("topics")))?,
        _ => return Err(DcciError::SchemaError(field("topics"))),
    };
    let body = match obj.get("body") {
        Some(Value::String(s)) => s.clone(),
        None => String::new(),
        _ => return Err(DcciError::SchemaError(field("body"))),
    };

    Ok(CurriculumWeek {
        week_index,
        title,
        start_date,
        end_date,
        topics,
        body,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn d(s: &str) -> NaiveDate {
        NaiveDate::parse_from_str(s, "%Y-%m-%d").unwrap()
    }

    fn doc(weeks: &[(u32, &str, &str)]) -> String {
        let weeks: Vec<Value> = weeks
            .iter()
            .map(|(n, s, e)| {
                serde_json::json!({
                    "week": n, "title": format!("W{n}"), "start_date": s, "end_date": e,
                    "topics": [format!("topic {n}a"), format!("topic {n}b")], "body": ""
                })
            })
            .collect();
        serde_json::json!({ "course": "Prog 1", "weeks": weeks }).to_string()
    }

    /// Brute-force oracle: scan weeks in document order, keep the last match
    /// by start date.
    fn scan(weeks: &[(u32, &str, &str)], day: NaiveDate) -> Option<u32> {
        let mut best: Option<(NaiveDate, u32)> = None;
        for (n, s, e) in weeks {
            let (s, e) = (d(s), d(e));
            if s <= day && day <= e && best.is_none_or(|(bs, _)| s > bs) {
                best = Some((s, *n));
            }
        }
        best.map(|(_, n)| n)
    }

    #[test]
    fn containment_picks_week() {
        let w = [(1, "2024-10-01", "2024-10-07"), (2, "2024-10-08", "2024-10-14")];
        let week = parse_curriculum_navigator(&doc(&w), d("2024-10-09")).unwrap();
        assert_eq!(week.week_index, 2);
    }

    #[test]
    fn before_first_week_has_no_active_week() {
        let w = [(1, "2024-10-01", "2024-10-07"), (2, "2024-10-08", "2024-10-14")];
        assert_eq!(
            parse_curriculum_navigator(&doc(&w), d("2024-09-01")),
            Err(DcciError::NoActiveWeek(d("2024-09-01")))
        );
    }

    #[test]
    fn shared_boundary_goes_to_later_week_for_every_day() {
        let w = [(1, "2024-10-01", "2024-10-08"), (2, "2024-10-08", "2024-10-14")];
        let parsed = CurriculumDocument::parse(&doc(&w)).unwrap();
        assert_eq!(parsed.active_week(d("2024-10-08")).unwrap().week_index, 2);
        let mut day = d("2024-09-29");
        while day <= d("2024-10-16") {
            let got = parsed.active_week(day).ok().map(|w| w.week_index);
            assert_eq!(got, scan(&w, day), "{day}");
            day = day.succ_opt().unwrap();
        }
    }

    #[test]
    fn schema_errors_name_the_field() {
        let bad = r#"{"course":"x","weeks":[{"week":1,"title":"a","start_date":"2024-10-01","end_date":"2024-10-07","topics":[]},
                     {"week":2,"title":"b","start_date":"2024/10/08","end_date":"2024-10-14","topics":[]}]}"#;
        assert_eq!(
            CurriculumDocument::parse(bad),
            Err(DcciError::SchemaError("weeks[1].start_date".into()))
        );
        assert_eq!(
            CurriculumDocument::parse(r#"{"weeks":[]}"#),
            Err(DcciError::SchemaError("course".into()))
        );
        let inverted = doc(&[(1, "2024-10-07", "2024-10-01")]);
        assert_eq!(
            CurriculumDocument::parse(&inverted),
            Err(DcciError::SchemaError("weeks[0].end_date".into()))
        );
    }

    #[test]
    fn overlapping_weeks_are_rejected() {
        let w = [(1, "2024-10-01", "2024-10-09"), (2, "2024-10-08", "2024-10-14")];
        assert!(matches!(CurriculumDocument::parse(&doc(&w)), Err(DcciError::SchemaError(_))));
    }

    #[test]
    fn context_text_lists_title_and_topics() {
        let w = [(2, "2024-10-08", "2024-10-14")];
        let week = parse_curriculum_navigator(&doc(&w), d("2024-10-09")).unwrap();
        let text = week.to_context_text();
        assert!(text.starts_with("Week 2: W2\nDates: 2024-10-08 to 2024-10-14"));
        assert!(text.contains("- topic 2a\n- topic 2b"));
    }
}
