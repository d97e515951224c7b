//! Slot-filled patient prompts and generation-input assembly.
//!
//! Rendering is a pure function of the indicator set, the retrieved passages
//! and the template asset, so a stored result can be replayed to the exact
//! bytes that were sent to the generator.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::model::{IndicatorKey, IndicatorSet, Value};
use crate::retrieval::{truncate_chars, EvidencePassage};

pub const DEFAULT_TEMPLATE: &str = include_str!("../assets/prompt_template.v1.toml");

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("invalid prompt template: {0}")]
    Template(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptTemplate {
    pub schema_version: String,
    pub instruction_header: String,
    pub summary_heading: String,
    pub indicator_heading: String,
    pub evidence_heading: String,
    pub slot_line: String,
    pub summary: String,
    pub passage_line: String,
    pub missing_token: String,
    pub no_evidence_marker: String,
    pub max_passage_chars: usize,
}

impl PromptTemplate {
    pub fn from_toml(text: &str) -> Result<Self, PromptError> {
        let t: PromptTemplate = toml::from_str(text).map_err(|e| PromptError::Template(e.to_string()))?;
        if !t.slot_line.contains("{value}") {
            return Err(PromptError::Template("slot_line must contain {value}".into()));
        }
        if t.missing_token.trim().is_empty() || t.no_evidence_marker.trim().is_empty() {
            return Err(PromptError::Template("missing_token and no_evidence_marker must be non-empty".into()));
        }
        Ok(t)
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self, PromptError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| PromptError::Template(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }
}

impl Default for PromptTemplate {
    fn default() -> Self {
        PromptTemplate::from_toml(DEFAULT_TEMPLATE).expect("shipped template parses")
    }
}

/// Single-pass `{name}` substitution; unknown placeholders are left verbatim.
fn fill(template: &str, vars: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        match after.find('}').map(|close| (&after[..close], close)) {
            Some((name, close)) if vars.iter().any(|(k, _)| *k == name) => {
                out.push_str(vars.iter().find(|(k, _)| *k == name).map(|(_, v)| *v).unwrap_or_default());
                rest = &after[close + 1..];
            }
            _ => {
                out.push('{');
                rest = after;
            }
        }
    }
    out.push_str(rest);
    out
}

/// Fixed-point rendering with at most four decimals and no trailing zeros.
pub fn format_number(x: f64) -> String {
    let s = format!("{x:.4}");
    let s = if s.contains('.') { s.trim_end_matches('0').trim_end_matches('.').to_string() } else { s };
    if s == "-0" {
        "0".into()
    } else {
        s
    }
}

fn with_unit(number: String, unit: &str) -> String {
    if unit.is_empty() {
        number
    } else {
        format!("{number} {unit}")
    }
}

pub fn render_value(value: &Value, missing_token: &str) -> String {
    match value {
        Value::Text { text } => text.clone(),
        Value::Number { value, unit } => with_unit(format_number(*value), unit),
        Value::Interval { days: 1 } => "1 day".into(),
        Value::Interval { days } => format!("{days} days"),
        Value::Count { count } => count.to_string(),
        Value::Boolean { value } => (if *value { "yes" } else { "no" }).into(),
        Value::PrePostPair { pre, post, unit } => {
            let unit = if unit.is_empty() { String::new() } else { format!(" {unit}") };
            format!(
                "pre {}{unit} / post {}{unit} (Δ = {})",
                format_number(*pre),
                format_number(*post),
                format_number(post - pre)
            )
        }
        Value::Missing => missing_token.to_string(),
    }
}

/// Slot-filled patient representation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientPrompt {
    pub summary_text: String,
    /// Exactly twelve lines in schema order.
    pub slot_lines: Vec<String>,
    pub schema_version: String,
    pub indicators: IndicatorSet,
}

impl PatientPrompt {
    /// Retrieval query text: the summary plus every documented slot line.
    pub fn query_text(&self) -> String {
        let documented: Vec<&str> = self
            .indicators
            .iter()
            .zip(&self.slot_lines)
            .filter(|(v, _)| !v.value.is_missing())
            .map(|(_, line)| line.as_str())
            .collect();
        if documented.is_empty() {
            self.summary_text.clone()
        } else {
            format!("{}\n{}", self.summary_text, documented.join("\n"))
        }
    }

    /// Query text restricted to indicators of one category group.
    pub fn query_text_for(&self, keys: &[IndicatorKey]) -> Option<String> {
        let lines: Vec<&str> = keys
            .iter()
            .filter(|k| !self.indicators.value(**k).is_missing())
            .map(|k| self.slot_lines[k.index()].as_str())
            .collect();
        (!lines.is_empty()).then(|| lines.join("\n"))
    }
}

pub fn template_fill(indicators: &IndicatorSet, template: &PromptTemplate) -> PatientPrompt {
    let slot_lines: Vec<String> = indicators
        .iter()
        .map(|slot| {
            let value = render_value(&slot.value, &template.missing_token);
            let description = slot.key.description().trim_end_matches('.');
            fill(&template.slot_line, &[("name", slot.key.name()), ("description", description), ("value", &value)])
        })
        .collect();
    let missing: Vec<&str> = indicators.iter().filter(|s| s.value.is_missing()).map(|s| s.key.name()).collect();
    let documented = indicators.documented_count().to_string();
    let total = IndicatorKey::ALL.len().to_string();
    let missing = if missing.is_empty() { "none".to_string() } else { missing.join(", ") };
    let summary_text = fill(&template.summary, &[("documented", &documented), ("total", &total), ("missing", &missing)]);
    PatientPrompt { summary_text, slot_lines, schema_version: template.schema_version.clone(), indicators: indicators.clone() }
}

/// Prompt plus tagged evidence, ready to send to a generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationInput {
    pub instruction_header: String,
    pub patient_prompt: PatientPrompt,
    /// Rendered passages in rank order; tag `E{i+1}` for position `i`.
    pub evidence_block: Vec<String>,
    pub evidence_tags: Vec<String>,
    summary_heading: String,
    indicator_heading: String,
    evidence_heading: String,
    no_evidence_marker: String,
}

impl GenerationInput {
    pub fn render(&self) -> String {
        let mut out = String::new();
        out.push_str(self.instruction_header.trim_end());
        out.push_str("\n\n");
        out.push_str(&self.summary_heading);
        out.push('\n');
        out.push_str(&self.patient_prompt.summary_text);
        out.push_str("\n\n");
        out.push_str(&self.indicator_heading);
        out.push('\n');
        for line in &self.patient_prompt.slot_lines {
            out.push_str(line);
            out.push('\n');
        }
        out.push('\n');
        out.push_str(&self.evidence_heading);
        out.push('\n');
        if self.evidence_block.is_empty() {
            out.push_str(&self.no_evidence_marker);
            out.push('\n');
        } else {
            for p in &self.evidence_block {
                out.push_str(p);
                out.push('\n');
            }
        }
        out
    }

    /// Hex SHA-256 of [`render`](Self::render).
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.render().as_bytes()))
    }

    pub fn has_evidence(&self) -> bool {
        !self.evidence_block.is_empty()
    }
}

pub fn assemble_generation_input(
    prompt: &PatientPrompt,
    evidence: &[EvidencePassage],
    template: &PromptTemplate,
) -> GenerationInput {
    let evidence_tags: Vec<String> = (1..=evidence.len()).map(|i| format!("E{i}")).collect();
    let evidence_block = evidence
        .iter()
        .zip(&evidence_tags)
        .map(|(p, tag)| {
            let text = truncate_chars(&p.text_snippet, template.max_passage_chars);
            fill(
                &template.passage_line,
                &[("tag", tag), ("category", p.category.as_str()), ("title", &p.title), ("text", text)],
            )
        })
        .collect();
    GenerationInput {
        instruction_header: template.instruction_header.clone(),
        patient_prompt: prompt.clone(),
        evidence_block,
        evidence_tags,
        summary_heading: template.summary_heading.clone(),
        indicator_heading: template.indicator_heading.clone(),
        evidence_heading: template.evidence_heading.clone(),
        no_evidence_marker: template.no_evidence_marker.clone(),
    }
}
