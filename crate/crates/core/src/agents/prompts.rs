//! Prompt templates with `{name}` placeholders.
//!
//! The built-in set is compiled in from `docs/prompts/`; a directory with
//! files of the same names overrides individual templates.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PromptTemplate(String);

impl PromptTemplate {
    pub fn new(text: impl Into<String>) -> Self {
        Self(text.into())
    }

    pub fn text(&self) -> &str {
        &self.0
    }

    /// Single-pass substitution of `{name}` for every `name` in `vars`.
    /// Unknown placeholders and other braces are left untouched, and
    /// substituted values are never re-scanned.
    pub fn render(&self, vars: &BTreeMap<&str, String>) -> String {
        let src = self.0.as_str();
        let mut out = String::with_capacity(src.len() + 256);
        let mut rest = src;
        while let Some(open) = rest.find('{') {
            out.push_str(&rest[..open]);
            let after = &rest[open + 1..];
            let close = after.find('}');
            let name = close.map(|c| &after[..c]);
            match name.and_then(|n| vars.get(n).map(|v| (n, v))) {
                Some((n, value)) => {
                    out.push_str(value);
                    rest = &after[n.len() + 1..];
                }
                None => {
                    out.push('{');
                    rest = after;
                }
            }
        }
        out.push_str(rest);
        out
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PromptSet {
    pub system: PromptTemplate,
    pub storyline: PromptTemplate,
    pub storyline_refine: PromptTemplate,
    pub hypothesis: PromptTemplate,
    pub text_decision: PromptTemplate,
    pub vision_decision: PromptTemplate,
    pub meta: PromptTemplate,
    pub suggestion: PromptTemplate,
    pub reask: PromptTemplate,
}

macro_rules! builtin {
    ($name:literal) => {
        include_str!(concat!("../../../../docs/prompts/", $name, ".txt"))
    };
}

impl Default for PromptSet {
    fn default() -> Self {
        Self {
            system: PromptTemplate::new(builtin!("system")),
            storyline: PromptTemplate::new(builtin!("storyline")),
            storyline_refine: PromptTemplate::new(builtin!("storyline_refine")),
            hypothesis: PromptTemplate::new(builtin!("hypothesis")),
            text_decision: PromptTemplate::new(builtin!("text_decision")),
            vision_decision: PromptTemplate::new(builtin!("vision_decision")),
            meta: PromptTemplate::new(builtin!("meta")),
            suggestion: PromptTemplate::new(builtin!("suggestion")),
            reask: PromptTemplate::new(builtin!("reask")),
        }
    }
}

impl PromptSet {
    /// Built-in templates, with any `<name>.txt` found in `dir` taking precedence.
    pub fn with_overrides(dir: &Path) -> std::io::Result<Self> {
        let mut set = Self::default();
        let slots: [(&str, &mut PromptTemplate); 9] = [
            ("system", &mut set.system),
            ("storyline", &mut set.storyline),
            ("storyline_refine", &mut set.storyline_refine),
            ("hypothesis", &mut set.hypothesis),
            ("text_decision", &mut set.text_decision),
            ("vision_decision", &mut set.vision_decision),
            ("meta", &mut set.meta),
            ("suggestion", &mut set.suggestion),
            ("reask", &mut set.reask),
        ];
        for (name, slot) in slots {
            let path = dir.join(format!("{name}.txt"));
            if path.exists() {
                *slot = PromptTemplate::new(fs::read_to_string(&path)?);
            }
        }
        Ok(set)
    }
}
