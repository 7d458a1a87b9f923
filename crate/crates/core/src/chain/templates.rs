//! Prompt templates, stored as text files with `{{name}}` placeholders.
//!
//! A template file holds the system text, a line reading `### USER`, and the
//! user text. A template set is a directory `<set>/` containing
//! `extraction.txt`, `summarization.txt`, `decision.txt` and `relation.txt`.
//! The `default` set is compiled into the binary.

use std::path::{Path, PathBuf};

use thiserror::Error;

const USER_MARKER: &str = "### USER";

pub const DEFAULT_TEMPLATE_SET: &str = "default";

#[derive(Debug, Error)]
pub enum TemplateError {
    #[error("failed to read template {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("template {name}: missing `{USER_MARKER}` line")]
    MissingUserSection { name: String },
    #[error("unknown built-in template set `{0}`; pass a template directory")]
    UnknownSet(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Template {
    pub system: String,
    pub user: String,
}

impl Template {
    pub fn parse(name: &str, raw: &str) -> Result<Self, TemplateError> {
        let mut system = Vec::new();
        let mut lines = raw.lines();
        for line in lines.by_ref() {
            if line.trim_end() == USER_MARKER {
                let user: Vec<&str> = lines.collect();
                return Ok(Template {
                    system: system.join("\n").trim().to_string(),
                    user: user.join("\n").trim().to_string(),
                });
            }
            system.push(line);
        }
        Err(TemplateError::MissingUserSection { name: name.to_string() })
    }

    /// Substitutes `{{key}}` placeholders in one pass, so substituted values
    /// are never re-expanded. Unknown placeholders are left as is.
    pub fn render(&self, vars: &[(&str, &str)]) -> (String, String) {
        (fill(&self.system, vars), fill(&self.user, vars))
    }
}

fn fill(text: &str, vars: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(text.len());
    let mut rest = text;
    while let Some(open) = rest.find("{{") {
        out.push_str(&rest[..open]);
        let after = &rest[open + 2..];
        match after.find("}}") {
            Some(close) => {
                let key = &after[..close];
                match vars.iter().find(|(k, _)| *k == key) {
                    Some((_, v)) => out.push_str(v),
                    None => out.push_str(&rest[open..open + 2 + close + 2]),
                }
                rest = &after[close + 2..];
            }
            None => {
                out.push_str(&rest[open..]);
                rest = "";
            }
        }
    }
    out.push_str(rest);
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TemplateSet {
    pub id: String,
    pub extraction: Template,
    pub summarization: Template,
    pub decision: Template,
    pub relation: Template,
}

impl TemplateSet {
    pub fn builtin(id: &str) -> Result<Self, TemplateError> {
        if id != DEFAULT_TEMPLATE_SET {
            return Err(TemplateError::UnknownSet(id.to_string()));
        }
        Ok(TemplateSet {
            id: id.to_string(),
            extraction: Template::parse("extraction", include_str!("../../templates/default/extraction.txt"))?,
            summarization: Template::parse("summarization", include_str!("../../templates/default/summarization.txt"))?,
            decision: Template::parse("decision", include_str!("../../templates/default/decision.txt"))?,
            relation: Template::parse("relation", include_str!("../../templates/default/relation.txt"))?,
        })
    }

    pub fn load(root: &Path, id: &str) -> Result<Self, TemplateError> {
        let dir = root.join(id);
        let read = |name: &str| -> Result<Template, TemplateError> {
            let path = dir.join(format!("{name}.txt"));
            let raw = std::fs::read_to_string(&path).map_err(|source| TemplateError::Io { path, source })?;
            Template::parse(name, &raw)
        };
        Ok(TemplateSet {
            id: id.to_string(),
            extraction: read("extraction")?,
            summarization: read("summarization")?,
            decision: read("decision")?,
            relation: read("relation")?,
        })
    }

    /// Loads from `root` when given, otherwise the compiled-in set.
    pub fn resolve(root: Option<&Path>, id: &str) -> Result<Self, TemplateError> {
        match root {
            Some(root) => Self::load(root, id),
            None => Self::builtin(id),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_set_parses() {
        let set = TemplateSet::builtin("default").unwrap();
        assert!(set.extraction.user.contains("{{chunk_text}}"));
        assert!(set.extraction.user.contains("{{schema}}"));
        assert!(set.decision.user.contains("{{mentions_json}}"));
        assert!(set.decision.user.contains("{{summaries}}"));
        assert!(set.relation.user.contains("{{anchor_name}}"));
        assert!(!set.summarization.system.is_empty());
    }

    #[test]
    fn render_fills_placeholders() {
        let t = Template::parse("t", "sys {{a}}\n### USER\nuser {{a}} {{b}} {{c}}").unwrap();
        let (s, u) = t.render(&[("a", "1"), ("b", "{{a}}")]);
        assert_eq!(s, "sys 1");
        assert_eq!(u, "user 1 {{a}} {{c}}");
    }

    #[test]
    fn missing_marker_is_an_error() {
        assert!(matches!(Template::parse("x", "only system"), Err(TemplateError::MissingUserSection { .. })));
        assert!(TemplateSet::builtin("other").is_err());
    }

    #[test]
    fn loads_from_directory() {
        let dir = tempfile::tempdir().unwrap();
        let set_dir = dir.path().join("v2");
        std::fs::create_dir_all(&set_dir).unwrap();
        for name in ["extraction", "summarization", "decision", "relation"] {
            std::fs::write(set_dir.join(format!("{name}.txt")), format!("{name} sys\n### USER\n{{{{chunk_text}}}}"))
                .unwrap();
        }
        let set = TemplateSet::load(dir.path(), "v2").unwrap();
        assert_eq!(set.id, "v2");
        assert_eq!(set.decision.system, "decision sys");
    }
}
