//! Public and private prompt templates.
//!
//! Slots are `{label}`, `{text}`, `{field_name}` and `{keyword}`. Any other
//! brace sequence is left untouched. Substituted values are not re-scanned.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::PrivateExample;

pub const SLOTS: [&str; 4] = ["label", "text", "field_name", "keyword"];

/// Extra slot values (`field_name`, `keyword`).
pub type SlotMap = BTreeMap<String, String>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TemplateError {
    #[error("template slot {{{0}}} has no value")]
    MissingSlot(String),
    #[error("privacy policy violation: {0}")]
    Policy(String),
    #[error("invalid template: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateKind {
    Public,
    Private,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    kind: TemplateKind,
    body: String,
}

impl PromptTemplate {
    /// A public template may not reference `{text}`.
    pub fn public(body: impl Into<String>) -> Result<Self, TemplateError> {
        let body = body.into();
        if slots_in(&body).iter().any(|s| *s == "text") {
            return Err(TemplateError::Policy(
                "public templates must not contain a {text} slot".into(),
            ));
        }
        Ok(Self {
            kind: TemplateKind::Public,
            body,
        })
    }

    /// A private template must reference `{text}` exactly where the private example goes.
    pub fn private(body: impl Into<String>) -> Result<Self, TemplateError> {
        let body = body.into();
        if !slots_in(&body).iter().any(|s| *s == "text") {
            return Err(TemplateError::Invalid(
                "private templates must contain a {text} slot".into(),
            ));
        }
        Ok(Self {
            kind: TemplateKind::Private,
            body,
        })
    }

    pub fn kind(&self) -> TemplateKind {
        self.kind
    }

    pub fn body(&self) -> &str {
        &self.body
    }

    pub fn slots(&self) -> Vec<&'static str> {
        slots_in(&self.body)
    }
}

fn slots_in(body: &str) -> Vec<&'static str> {
    let mut found = Vec::new();
    for slot in SLOTS {
        if body.contains(&format!("{{{slot}}}")) {
            found.push(slot);
        }
    }
    found
}

/// Instantiate `template`.
///
/// `{keyword}` falls back to `label` when `extras` has no `keyword` entry.
pub fn render_prompt(
    template: &PromptTemplate,
    label: &str,
    example: Option<&PrivateExample>,
    extras: &SlotMap,
) -> Result<String, TemplateError> {
    if template.kind == TemplateKind::Public && example.is_some() {
        return Err(TemplateError::Policy(
            "a private example was passed to a public template".into(),
        ));
    }
    let value_for = |slot: &str| -> Option<&str> {
        match slot {
            "label" => Some(label),
            "text" => example.map(|e| e.text.as_str()),
            "keyword" => extras.get("keyword").map(String::as_str).or(Some(label)),
            other => extras.get(other).map(String::as_str),
        }
    };

    let body = template.body.as_str();
    let mut out = String::with_capacity(body.len() + 64);
    let mut rest = body;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        let slot = after
            .find('}')
            .map(|close| &after[..close])
            .filter(|name| SLOTS.contains(name));
        match slot {
            Some(name) => {
                let value = value_for(name).ok_or_else(|| TemplateError::MissingSlot(name.into()))?;
                out.push_str(value);
                rest = &after[name.len() + 1..];
            }
            None => {
                out.push('{');
                rest = after;
            }
        }
    }
    out.push_str(rest);
    Ok(out)
}

/// Matching public and private templates for one task.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TemplatePair {
    pub public: PromptTemplate,
    pub private: PromptTemplate,
}

impl TemplatePair {
    pub fn new(public: &str, private: &str) -> Result<Self, TemplateError> {
        Ok(Self {
            public: PromptTemplate::public(public)?,
            private: PromptTemplate::private(private)?,
        })
    }
}

const AGNEWS_PUBLIC: &str = "#[User]\nGenerate only a text of news type {label}.\n\n#[Assistant]\nText:";
const AGNEWS_PRIVATE: &str =
    "Here are texts with News Type: {label}.\n\n{text}\n\nPlease give me another one.\n\n# [Assistant]\nText:";
const DBPEDIA_PUBLIC: &str = "#[User]\nGenerate only a wiki entry of Category {label}.\n\n#[Assistant]\nText:";
const DBPEDIA_PRIVATE: &str = "# [User] \nHere are entries of Category: {label}.\n\n{text}\n\nPlease give me another one.\n\n# [Assistant]\nEntry:";
const TREC_PUBLIC: &str = "#[User]\nGenerate only a question with Answer Type {label}.\n\n#[Assistant]\nQuestion:";
const TREC_PRIVATE: &str = "# [User] \nHere are questions with Answer Type: {label}.\n\n{text}\n\nPlease give me another one.\n\n# [Assistant]\nQuestion:";
const MIT_PUBLIC: &str = "#[User]\nGive me text about a film and the extracted Phrase about its {field_name}. IMPORTANT: The exact {field_name} phrase \"{keyword}\" must be mentioned in Text.\n\n# [Assistant]\nPhrase: \"{keyword}\"\nText: \"";
const MIT_PRIVATE: &str = "# [User] \nGive me text about a film and the extracted Phrase about its {field_name}.\n{text}\n\nPlease give me another Phrase and Text. IMPORTANT: The exact {field_name} phrase \"{keyword}\" must be mentioned in Text.\n\n# [Assistant]\nPhrase: \"{keyword}\"\nText: \"";

/// Built-in template pairs: `agnews`, `dbpedia`, `trec`, `mit` (MIT-G / MIT-D).
pub fn builtin_templates(name: &str) -> Option<TemplatePair> {
    let (public, private) = match name.to_ascii_lowercase().as_str() {
        "agnews" => (AGNEWS_PUBLIC, AGNEWS_PRIVATE),
        "dbpedia" => (DBPEDIA_PUBLIC, DBPEDIA_PRIVATE),
        "trec" => (TREC_PUBLIC, TREC_PRIVATE),
        "mit" | "mit-g" | "mit-d" => (MIT_PUBLIC, MIT_PRIVATE),
        _ => return None,
    };
    Some(TemplatePair::new(public, private).expect("built-in templates are well formed"))
}
