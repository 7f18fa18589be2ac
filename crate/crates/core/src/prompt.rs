//! Prompt templates with named `{placeholder}` slots.
//!
//! Rendering is a single pass: substituted values are never rescanned, so a
//! value containing `{persona_1}` is inserted literally. A slot whose value
//! is `None` removes the whole template line it sits on.

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use thiserror::Error;

pub const DEFAULT_REFINE_TEMPLATE: &str = include_str!("../templates/refine.txt");
pub const DEFAULT_RESPONSE_TEMPLATE: &str = include_str!("../templates/response.txt");

pub const REFINE_SLOTS: [&str; 6] = [
    "persona_1",
    "fragment_1",
    "source_1",
    "persona_2",
    "fragment_2",
    "source_2",
];
pub const RESPONSE_SLOTS: [&str; 3] = ["personas_A", "personas_B", "dialogue"];
pub const STRATEGY_MARKERS: [&str; 3] = ["[Resolution]", "[Disambiguation]", "[NO_CONFLICT]"];

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TemplateError {
    #[error("template {template} lacks placeholder {{{slot}}}")]
    MissingSlot { template: String, slot: String },
    #[error("template {template} lacks marker {marker}")]
    MissingMarker { template: String, marker: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Template {
    pub id: String,
    text: String,
}

impl Template {
    pub fn new(id: impl Into<String>, text: impl Into<String>, slots: &[&str]) -> Result<Self, TemplateError> {
        let t = Template {
            id: id.into(),
            text: text.into(),
        };
        for slot in slots {
            if !t.text.contains(&alloc::format!("{{{slot}}}")) {
                return Err(TemplateError::MissingSlot {
                    template: t.id.clone(),
                    slot: slot.to_string(),
                });
            }
        }
        Ok(t)
    }

    /// A refinement template: all six slots plus the three strategy markers.
    pub fn refinement(id: impl Into<String>, text: impl Into<String>) -> Result<Self, TemplateError> {
        let t = Template::new(id, text, &REFINE_SLOTS)?;
        for marker in STRATEGY_MARKERS {
            if !t.text.contains(marker) {
                return Err(TemplateError::MissingMarker {
                    template: t.id.clone(),
                    marker: marker.to_string(),
                });
            }
        }
        Ok(t)
    }

    pub fn response(id: impl Into<String>, text: impl Into<String>) -> Result<Self, TemplateError> {
        Template::new(id, text, &RESPONSE_SLOTS)
    }

    pub fn default_refinement() -> Self {
        Template::refinement("refine-default", DEFAULT_REFINE_TEMPLATE).expect("bundled template is valid")
    }

    pub fn default_response() -> Self {
        Template::response("response-default", DEFAULT_RESPONSE_TEMPLATE).expect("bundled template is valid")
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn render(&self, values: &[(&str, Option<&str>)]) -> String {
        let mut out = String::with_capacity(self.text.len());
        for line in self.text.split_inclusive('\n') {
            if let Some(rendered) = render_line(line, values) {
                out.push_str(&rendered);
            }
        }
        out
    }
}

fn render_line(line: &str, values: &[(&str, Option<&str>)]) -> Option<String> {
    let mut out = String::with_capacity(line.len());
    let mut rest = line;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        let slot = after
            .find('}')
            .map(|close| &after[..close])
            .and_then(|name| values.iter().find(|(n, _)| *n == name));
        match slot {
            Some((name, value)) => {
                out.push_str((*value)?);
                rest = &after[name.len() + 1..];
            }
            None => {
                out.push('{');
                rest = after;
            }
        }
    }
    out.push_str(rest);
    Some(out)
}

/// Collapse newlines and escape backslashes so multi-line values cannot
/// imitate template structure.
pub fn escape_inline(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    for c in text.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            _ => out.push(c),
        }
    }
    out
}

pub fn bullet_list<'a>(items: impl IntoIterator<Item = &'a str>) -> String {
    let lines: Vec<String> = items
        .into_iter()
        .map(|s| alloc::format!("\n- {}", escape_inline(s)))
        .collect();
    lines.concat()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn substitutes_once() {
        let t = Template::new("t", "a {x} b {y}\n", &["x", "y"]).unwrap();
        assert_eq!(t.render(&[("x", Some("{y}")), ("y", Some("2"))]), "a {y} b 2\n");
    }

    #[test]
    fn none_drops_line() {
        let t = Template::new("t", "head\nA:{x}\ntail {y}\n", &["x"]).unwrap();
        assert_eq!(t.render(&[("x", None), ("y", Some("!"))]), "head\ntail !\n");
    }

    #[test]
    fn unknown_braces_are_literal() {
        let t = Template::new("t", "{not a slot} {x}", &["x"]).unwrap();
        assert_eq!(t.render(&[("x", Some("v"))]), "{not a slot} v");
    }

    #[test]
    fn bundled_templates_validate() {
        let r = Template::default_refinement();
        let out = r.render(&[
            ("persona_1", Some("I feel happy.")),
            ("fragment_1", Some("B: hi")),
            ("source_1", Some("I feel happy.")),
            ("persona_2", Some("I feel sad.")),
            ("fragment_2", Some("B: bye")),
            ("source_2", Some("I feel sad.")),
        ]);
        for m in STRATEGY_MARKERS {
            assert!(out.contains(m));
        }
        assert!(out.contains("Persona 2: I feel sad."));
        Template::default_response();
        assert!(matches!(
            Template::refinement("bad", "{persona_1}"),
            Err(TemplateError::MissingSlot { .. })
        ));
    }
}
