use std::path::Path;

use crate::error::{Error, Result};
use crate::relsdata::{apply_ordering, OrderingStrategy, RelationInstance, UnifiedLabel};

const DEFAULT_TEMPLATE: &str = "\
You are an expert annotator of discourse relations between two text spans.
Choose the single relation label that best describes how Unit 2 relates to Unit 1.
Allowed labels:
{labels}

Answer with one label from the list and nothing else.
{examples}
Unit 1: {arg1}
Unit 2: {arg2}
Relation:";

/// Prompt text with `{labels}`, `{examples}`, `{arg1}` and `{arg2}` slots.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    text: String,
}

impl Default for PromptTemplate {
    fn default() -> Self {
        Self {
            text: DEFAULT_TEMPLATE.to_string(),
        }
    }
}

impl PromptTemplate {
    pub fn new(text: impl Into<String>) -> Result<Self> {
        let text = text.into();
        for slot in ["{arg1}", "{arg2}"] {
            if !text.contains(slot) {
                return Err(Error::Config(format!("prompt template lacks the {slot} slot")));
            }
        }
        Ok(Self { text })
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::new(text)
    }

    pub fn text(&self) -> &str {
        &self.text
    }
}

fn label_list() -> String {
    UnifiedLabel::ALL.iter().map(|l| l.name()).collect::<Vec<_>>().join(", ")
}

fn example_block(i: usize, e: &RelationInstance, ordering: OrderingStrategy) -> String {
    let pair = apply_ordering(e, ordering);
    format!(
        "\nExample {}:\nUnit 1: {}\nUnit 2: {}\nRelation: {}\n",
        i + 1,
        pair.first,
        pair.second,
        e.label
    )
}

/// Pure rendering: identical inputs give identical bytes.
pub fn render_prompt(
    template: &PromptTemplate,
    instance: &RelationInstance,
    examples: &[RelationInstance],
    ordering: OrderingStrategy,
) -> String {
    let pair = apply_ordering(instance, ordering);
    let examples: String = examples
        .iter()
        .enumerate()
        .map(|(i, e)| example_block(i, e, ordering))
        .collect();
    template
        .text
        .replace("{labels}", &label_list())
        .replace("{examples}", &examples)
        .replace("{arg1}", &pair.first)
        .replace("{arg2}", &pair.second)
}

/// First standalone, case-insensitive label word in `text`.
pub fn parse_response(text: &str) -> Option<UnifiedLabel> {
    text.split(|c: char| !c.is_alphabetic())
        .filter(|w| !w.is_empty())
        .find_map(|w| w.to_lowercase().parse().ok())
}
