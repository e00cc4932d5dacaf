//! Prompt templates shipped as text assets and a strict placeholder renderer.
//!
//! Placeholders are `{name}` where `name` is lower-case snake case. Any other
//! brace usage, such as the JSON examples inside the templates, is left alone.

use std::collections::BTreeMap;
use std::sync::LazyLock;

use regex::Regex;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Template {
    ActionProposal,
    ActionFilter,
    EditInstruction,
    EditEvaluation,
    Refinement,
    AnswerMatch,
}

impl Template {
    pub const ALL: [Template; 6] = [
        Template::ActionProposal,
        Template::ActionFilter,
        Template::EditInstruction,
        Template::EditEvaluation,
        Template::Refinement,
        Template::AnswerMatch,
    ];

    pub fn text(self) -> &'static str {
        match self {
            Template::ActionProposal => include_str!("../prompts/action_proposal.txt"),
            Template::ActionFilter => include_str!("../prompts/action_filter.txt"),
            Template::EditInstruction => include_str!("../prompts/edit_instruction.txt"),
            Template::EditEvaluation => include_str!("../prompts/edit_evaluation.txt"),
            Template::Refinement => include_str!("../prompts/refinement.txt"),
            Template::AnswerMatch => include_str!("../prompts/answer_match.txt"),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Template::ActionProposal => "action_proposal",
            Template::ActionFilter => "action_filter",
            Template::EditInstruction => "edit_instruction",
            Template::EditEvaluation => "edit_evaluation",
            Template::Refinement => "refinement",
            Template::AnswerMatch => "answer_match",
        }
    }

    /// Placeholder names in order of first appearance.
    pub fn placeholders(self) -> Vec<&'static str> {
        let mut out: Vec<&'static str> = Vec::new();
        for c in PLACEHOLDER.captures_iter(self.text()) {
            let name = c.get(1).expect("group 1 always participates").as_str();
            if !out.contains(&name) {
                out.push(name);
            }
        }
        out
    }

    pub fn render(self, vars: &[(&str, &str)]) -> Result<String, TemplateError> {
        render(self.text(), vars).map_err(|e| match e {
            TemplateError::Missing { name, .. } => TemplateError::Missing { template: self.name(), name },
            other => other,
        })
    }
}

#[derive(Debug, thiserror::Error, Clone, PartialEq, Eq)]
pub enum TemplateError {
    #[error("template {template} needs a value for {{{name}}}")]
    Missing { template: &'static str, name: String },
    #[error("variable {0} does not appear in the template")]
    Unused(String),
}

static PLACEHOLDER: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\{([a-z][a-z0-9_]*)\}").expect("static regex"));

/// Substitutes every placeholder in one pass, so substituted values are never
/// themselves scanned for placeholders.
pub fn render(template: &str, vars: &[(&str, &str)]) -> Result<String, TemplateError> {
    let map: BTreeMap<&str, &str> = vars.iter().copied().collect();
    let mut used = BTreeMap::new();
    let mut out = String::with_capacity(template.len());
    let mut last = 0;
    for c in PLACEHOLDER.captures_iter(template) {
        let whole = c.get(0).expect("group 0 always participates");
        let name = &c[1];
        let value =
            map.get(name).ok_or_else(|| TemplateError::Missing { template: "inline", name: name.to_string() })?;
        used.insert(name.to_string(), ());
        out.push_str(&template[last..whole.start()]);
        out.push_str(value);
        last = whole.end();
    }
    out.push_str(&template[last..]);
    if let Some((k, _)) = map.iter().find(|(k, _)| !used.contains_key(**k)) {
        return Err(TemplateError::Unused(k.to_string()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_braces_are_not_placeholders() {
        assert_eq!(Template::EditInstruction.placeholders(), vec!["action_caption"]);
        assert_eq!(Template::ActionProposal.placeholders(), vec!["caption", "num_actions"]);
        assert_eq!(Template::ActionFilter.placeholders(), vec!["caption", "actions"]);
        assert_eq!(Template::EditEvaluation.placeholders(), vec!["editing_prompt"]);
        assert_eq!(
            Template::Refinement.placeholders(),
            vec!["desired_outcome", "original_prompt", "failed_list", "failure_block"]
        );
        assert_eq!(Template::AnswerMatch.placeholders(), vec!["question", "reference", "candidate"]);
    }

    #[test]
    fn values_are_not_rescanned() {
        let out = render("a {x} b", &[("x", "{x}")]).unwrap();
        assert_eq!(out, "a {x} b");
    }

    #[test]
    fn missing_and_unused_variables_are_errors() {
        assert!(matches!(Template::EditEvaluation.render(&[]), Err(TemplateError::Missing { .. })));
        assert_eq!(render("{a}", &[("a", "1"), ("b", "2")]), Err(TemplateError::Unused("b".into())));
    }
}
