//! Text normalization, section detection and chunk segmentation.

use std::fmt;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use super::ExtractionError;
use crate::model::{ClinicalDocument, DocumentChunk, Modality};

pub const DEFAULT_MAX_CHUNK_CHARS: usize = 1200;
pub const MIN_CHUNK_CHARS: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SectionLabel {
    Diagnosis,
    InterventionHistory,
    LaboratoryFindings,
    PostoperativeEvolution,
}

impl SectionLabel {
    pub fn as_str(self) -> &'static str {
        match self {
            SectionLabel::Diagnosis => "diagnosis",
            SectionLabel::InterventionHistory => "intervention_history",
            SectionLabel::LaboratoryFindings => "laboratory_findings",
            SectionLabel::PostoperativeEvolution => "postoperative_evolution",
        }
    }
}

impl fmt::Display for SectionLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Line prefixes (lowercase, compared before the first `:`) that open a section.
const HEADERS: &[(&str, SectionLabel)] = &[
    ("diagnosis", SectionLabel::Diagnosis),
    ("diagnoses", SectionLabel::Diagnosis),
    ("impression", SectionLabel::Diagnosis),
    ("assessment", SectionLabel::Diagnosis),
    ("intervention history", SectionLabel::InterventionHistory),
    ("interventions", SectionLabel::InterventionHistory),
    ("surgical history", SectionLabel::InterventionHistory),
    ("operative history", SectionLabel::InterventionHistory),
    ("procedures", SectionLabel::InterventionHistory),
    ("laboratory findings", SectionLabel::LaboratoryFindings),
    ("laboratory", SectionLabel::LaboratoryFindings),
    ("labs", SectionLabel::LaboratoryFindings),
    ("blood tests", SectionLabel::LaboratoryFindings),
    ("wbc", SectionLabel::LaboratoryFindings),
    ("postoperative evolution", SectionLabel::PostoperativeEvolution),
    ("postoperative course", SectionLabel::PostoperativeEvolution),
    ("follow-up", SectionLabel::PostoperativeEvolution),
    ("follow up", SectionLabel::PostoperativeEvolution),
    ("evolution", SectionLabel::PostoperativeEvolution),
];

fn detect_header(line: &str) -> Option<SectionLabel> {
    let head = line.split(':').next().unwrap_or(line).trim().to_lowercase();
    let head = head.trim_end_matches(['.', '-']).trim();
    // a header is either "Header:" or a short line consisting of the header alone
    if !line.contains(':') && head.split_whitespace().count() > 3 {
        return None;
    }
    HEADERS.iter().find(|(h, _)| head == *h).map(|&(_, label)| label)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Section {
    pub label: Option<SectionLabel>,
    /// Normalized lines belonging to this section, in order.
    pub lines: Vec<String>,
}

/// Lossy cleaned view of a document. The source text is only recoverable from
/// the original [`ClinicalDocument`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NormalizedDocument {
    pub doc_id: String,
    pub modality: Modality,
    pub timestamp: Option<NaiveDate>,
    pub sections: Vec<Section>,
    pub image_ref: Option<String>,
}

impl NormalizedDocument {
    /// Normalized text, one line per source line.
    pub fn text(&self) -> String {
        self.sections.iter().flat_map(|s| s.lines.iter().map(String::as_str)).collect::<Vec<_>>().join("\n")
    }

    /// Label of the first labelled section, if any.
    pub fn primary_section(&self) -> Option<SectionLabel> {
        self.sections.iter().find_map(|s| s.label)
    }
}

/// Removes control characters, collapses runs of whitespace inside each line
/// and drops blank lines.
pub fn normalize_text(raw: &str) -> Vec<String> {
    raw.split('\n')
        .map(|line| {
            let cleaned: String = line
                .chars()
                .map(|c| if c == '\t' { ' ' } else { c })
                .filter(|c| !c.is_control())
                .collect();
            cleaned.split_whitespace().collect::<Vec<_>>().join(" ")
        })
        .filter(|l| !l.is_empty())
        .collect()
}

pub fn normalize_document(doc: &ClinicalDocument) -> Result<NormalizedDocument, ExtractionError> {
    let lines = normalize_text(&doc.raw_text);
    if lines.is_empty() && doc.image_ref.is_none() {
        return Err(ExtractionError::UnusableDocument { doc_id: doc.id.clone() });
    }
    let mut sections: Vec<Section> = Vec::new();
    for line in lines {
        match detect_header(&line) {
            Some(label) => sections.push(Section { label: Some(label), lines: vec![line] }),
            None => match sections.last_mut() {
                Some(s) => s.lines.push(line),
                None => sections.push(Section { label: None, lines: vec![line] }),
            },
        }
    }
    Ok(NormalizedDocument {
        doc_id: doc.id.clone(),
        modality: doc.modality,
        timestamp: doc.timestamp,
        sections,
        image_ref: doc.image_ref.clone(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "SegmentationPolicyRaw")]
pub struct SegmentationPolicy {
    max_chunk_chars: usize,
}

#[derive(Deserialize)]
struct SegmentationPolicyRaw {
    max_chunk_chars: usize,
}

impl TryFrom<SegmentationPolicyRaw> for SegmentationPolicy {
    type Error = ExtractionError;

    fn try_from(raw: SegmentationPolicyRaw) -> Result<Self, Self::Error> {
        SegmentationPolicy::new(raw.max_chunk_chars)
    }
}

impl SegmentationPolicy {
    pub fn new(max_chunk_chars: usize) -> Result<Self, ExtractionError> {
        if max_chunk_chars < MIN_CHUNK_CHARS {
            return Err(ExtractionError::InvalidPolicy { min: MIN_CHUNK_CHARS, got: max_chunk_chars });
        }
        Ok(SegmentationPolicy { max_chunk_chars })
    }

    pub fn max_chunk_chars(&self) -> usize {
        self.max_chunk_chars
    }
}

impl Default for SegmentationPolicy {
    fn default() -> Self {
        SegmentationPolicy { max_chunk_chars: DEFAULT_MAX_CHUNK_CHARS }
    }
}

/// Splits a line after `.`, `!` or `?` when followed by whitespace.
fn sentences(line: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut start = 0;
    let mut iter = line.char_indices().peekable();
    while let Some((i, c)) = iter.next() {
        if matches!(c, '.' | '!' | '?') {
            if let Some(&(j, next)) = iter.peek() {
                if next == ' ' {
                    out.push(line[start..=i].trim());
                    start = j + 1;
                }
            }
        }
    }
    let rest = line[start..].trim();
    if !rest.is_empty() {
        out.push(rest);
    }
    out.retain(|s| !s.is_empty());
    out
}

/// Cuts `text` into pieces of at most `max` chars, preferring the last space.
fn hard_cut(text: &str, max: usize) -> Vec<String> {
    let mut out = Vec::new();
    let mut rest = text.trim();
    while rest.chars().count() > max {
        let limit = rest.char_indices().nth(max).map_or(rest.len(), |(i, _)| i);
        let cut = if rest[limit..].starts_with(' ') {
            limit
        } else {
            match rest[..limit].rfind(' ') {
                Some(sp) if sp > 0 => sp,
                _ => limit,
            }
        };
        out.push(rest[..cut].trim_end().to_string());
        rest = rest[cut..].trim_start();
    }
    if !rest.is_empty() {
        out.push(rest.to_string());
    }
    out
}

/// Greedy sentence packing for one section.
fn pack_section(section: &Section, max: usize) -> Vec<String> {
    let mut out = Vec::new();
    let mut current = String::new();
    let mut current_len = 0usize;
    for line in &section.lines {
        for piece in sentences(line).into_iter().flat_map(|s| hard_cut(s, max)) {
            let len = piece.chars().count();
            if current_len > 0 && current_len + 1 + len > max {
                out.push(std::mem::take(&mut current));
                current_len = 0;
            }
            if current_len > 0 {
                current.push(' ');
                current_len += 1;
            }
            current.push_str(&piece);
            current_len += len;
        }
    }
    if !current.is_empty() {
        out.push(current);
    }
    out
}

/// Packs sentences of each section greedily into chunks no longer than the
/// policy limit; oversize sentences are hard-cut. Chunks never span sections.
pub fn segment_chunks(doc: &NormalizedDocument, policy: &SegmentationPolicy) -> Vec<DocumentChunk> {
    let mut out = Vec::new();
    for section in &doc.sections {
        for text in pack_section(section, policy.max_chunk_chars) {
            out.push(DocumentChunk {
                doc_id: doc.doc_id.clone(),
                chunk_index: out.len(),
                text,
                section_label: section.label.map(|l| l.as_str().to_string()),
            });
        }
    }
    out
}
