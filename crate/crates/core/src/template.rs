//! Minimal `{slot}` substitution for the prompt assets.

use std::collections::BTreeSet;

/// A prompt template with named `{slot}` placeholders.
///
/// Substitution is a single left-to-right pass, so slot-like text inside a
/// substituted value is never expanded again. Braces that do not enclose a
/// known slot name are copied through unchanged.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Template {
    text: String,
}

impl Template {
    pub fn new(text: impl Into<String>) -> Self {
        Self { text: text.into() }
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    /// Names of every `{identifier}` placeholder in the template.
    pub fn slots(&self) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        let mut rest = self.text.as_str();
        while let Some(open) = rest.find('{') {
            rest = &rest[open + 1..];
            if let Some(close) = rest.find('}') {
                let name = &rest[..close];
                if is_slot_name(name) {
                    out.insert(name.to_string());
                }
            }
        }
        out
    }

    pub fn render(&self, values: &[(&str, &str)]) -> String {
        let mut out = String::with_capacity(self.text.len() * 2);
        let mut rest = self.text.as_str();
        while let Some(open) = rest.find('{') {
            out.push_str(&rest[..open]);
            let after = &rest[open + 1..];
            let substituted = after.find('}').and_then(|close| {
                let name = &after[..close];
                values
                    .iter()
                    .find(|(k, _)| *k == name)
                    .map(|(_, v)| (close, *v))
            });
            match substituted {
                Some((close, value)) => {
                    out.push_str(value);
                    rest = &after[close + 1..];
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

fn is_slot_name(s: &str) -> bool {
    !s.is_empty() && s.chars().all(|c| c.is_ascii_lowercase() || c == '_')
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn substitutes_in_one_pass() {
        let t = Template::new("a {x} b {y} {z}");
        assert_eq!(t.render(&[("x", "{y}"), ("y", "2")]), "a {y} b 2 {z}");
    }

    #[test]
    fn lists_slots() {
        let t = Template::new("{tools} and {tool_names} {Not} {}");
        let slots: Vec<_> = t.slots().into_iter().collect();
        assert_eq!(slots, vec!["tool_names", "tools"]);
    }
}
