use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use super::DcciError;
use crate::lms::CoursePageRef;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceKind {
    LmsPage,
    CurriculumNavigator,
    WebSearch,
}

impl SourceKind {
    pub fn is_lms(self) -> bool {
        matches!(self, SourceKind::LmsPage | SourceKind::CurriculumNavigator)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnowledgeBaseConfig {
    pub kb_id: String,
    pub display_name: String,
    pub source_kind: SourceKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub page_ref: Option<CoursePageRef>,
    pub template_id: String,
    /// Seconds a fetched page may be reused. 0 fetches on every call.
    #[serde(default)]
    pub cache_ttl: u64,
}

impl KnowledgeBaseConfig {
    pub fn lms_page(kb_id: &str, display_name: &str, page: CoursePageRef, template_id: &str) -> Self {
        Self {
            kb_id: kb_id.into(),
            display_name: display_name.into(),
            source_kind: SourceKind::LmsPage,
            page_ref: Some(page),
            template_id: template_id.into(),
            cache_ttl: 0,
        }
    }

    pub fn validate(&self) -> Result<(), DcciError> {
        if self.kb_id.trim().is_empty() {
            return Err(DcciError::InvalidConfig("kb_id is empty".into()));
        }
        match (self.source_kind.is_lms(), self.page_ref.is_some()) {
            (true, false) => Err(DcciError::InvalidConfig(format!(
                "knowledge base {:?} needs a page_ref",
                self.kb_id
            ))),
            (false, true) => Err(DcciError::InvalidConfig(format!(
                "knowledge base {:?} is web_search and must not carry a page_ref",
                self.kb_id
            ))),
            _ => Ok(()),
        }
    }
}

/// Ordered set of knowledge bases with unique ids.
#[derive(Debug, Clone, Default, Serialize)]
pub struct KbRegistry {
    kbs: Vec<KnowledgeBaseConfig>,
}

impl KbRegistry {
    pub fn new(kbs: Vec<KnowledgeBaseConfig>) -> Result<Self, DcciError> {
        let mut seen = HashSet::new();
        for kb in &kbs {
            kb.validate()?;
            if !seen.insert(kb.kb_id.as_str()) {
                return Err(DcciError::InvalidConfig(format!("duplicate kb_id {:?}", kb.kb_id)));
            }
        }
        Ok(Self { kbs })
    }

    /// The four knowledge bases of a standard course deployment.
    pub fn standard(course_id: &str) -> Self {
        let page = |slug: &str| CoursePageRef::new(course_id, slug).expect("static slug is valid");
        let kbs = vec![
            KnowledgeBaseConfig::lms_page("general-info", "General Course Information", page("general-info"), "course_content"),
            KnowledgeBaseConfig::lms_page("tms-manual", "TMS User Manual", page("tms-user-manual"), "course_content"),
            KnowledgeBaseConfig {
                kb_id: "weekly-topic".into(),
                display_name: "Weekly Topic".into(),
                source_kind: SourceKind::CurriculumNavigator,
                page_ref: Some(page("curriculum-navigator")),
                template_id: "weekly_topic".into(),
                cache_ttl: 0,
            },
            KnowledgeBaseConfig {
                kb_id: "internet-wizard".into(),
                display_name: "Internet Wizard".into(),
                source_kind: SourceKind::WebSearch,
                page_ref: None,
                template_id: "web_search".into(),
                cache_ttl: 0,
            },
        ];
        Self::new(kbs).expect("standard registry is valid")
    }

    pub fn get(&self, kb_id: &str) -> Option<&KnowledgeBaseConfig> {
        self.kbs.iter().find(|kb| kb.kb_id == kb_id)
    }

    pub fn contains(&self, kb_id: &str) -> bool {
        self.get(kb_id).is_some()
    }

    pub fn iter(&self) -> impl Iterator<Item = &KnowledgeBaseConfig> {
        self.kbs.iter()
    }

    pub fn len(&self) -> usize {
        self.kbs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kbs.is_empty()
    }
}
