//! Generation backends, output parsing and label-likelihood confidence.
//!
//! A backend turns a [`GenerationInput`] into free text of the form
//!
//! ```text
//! SUMMARY: ...
//! PROGNOSIS: <Excellent | Good | Fair | Poor>
//! RATIONALE: ... [E1] ...
//! ```
//!
//! Backends that can score forced continuations also return one
//! log-likelihood per label; the confidence reported for a prediction is the
//! softmax of those four numbers evaluated at the parsed label.

mod mock;
mod remote;

use std::collections::BTreeSet;
use std::sync::OnceLock;
use std::time::Duration;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::UnifiedLabel;
use crate::prompting::GenerationInput;

pub use mock::{Condition, MockBackend, MockRule, MockRuleTable, DEFAULT_MOCK_RULES};
pub use remote::{RemoteChatBackend, RemoteChatConfig};

#[derive(Debug, Error)]
pub enum GenerationError {
    #[error("generation transport error: {message}")]
    Transport { message: String, retriable: bool },
    #[error("generation timed out after {attempts} attempts")]
    Timeout { attempts: u32 },
    #[error("backend returned empty output")]
    EmptyOutput,
    #[error("output has no recognizable {missing}")]
    Unparseable { missing: &'static str, raw: String },
    #[error("backend \"{backend}\" does not support {capability}")]
    Unsupported { backend: String, capability: &'static str },
    #[error("invalid label scores: {0}")]
    InvalidScores(String),
    #[error("invalid mock rule table: {0}")]
    Rules(String),
}

impl GenerationError {
    pub fn is_retriable(&self) -> bool {
        matches!(self, GenerationError::Transport { retriable: true, .. })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendCapabilities {
    pub supports_label_scoring: bool,
    pub deterministic: bool,
    pub name: String,
    pub max_in_flight: usize,
}

pub trait GenerationBackend: Send + Sync {
    fn capabilities(&self) -> BackendCapabilities;

    /// One generation attempt. Transport decoding only; no post-processing.
    fn generate(&self, input: &GenerationInput) -> Result<String, GenerationError>;

    /// Forced-continuation log-likelihood of each label verbalization.
    fn score_labels(&self, _input: &GenerationInput) -> Result<LabelScores, GenerationError> {
        Err(GenerationError::Unsupported { backend: self.capabilities().name, capability: "label scoring" })
    }
}

/// Natural-log likelihood per label.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "LabelScoresRaw", into = "LabelScoresRaw")]
pub struct LabelScores {
    values: [f64; 4],
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LabelScoresRaw {
    poor: f64,
    fair: f64,
    good: f64,
    excellent: f64,
}

impl TryFrom<LabelScoresRaw> for LabelScores {
    type Error = GenerationError;

    fn try_from(r: LabelScoresRaw) -> Result<Self, Self::Error> {
        LabelScores::new([r.poor, r.fair, r.good, r.excellent])
    }
}

impl From<LabelScores> for LabelScoresRaw {
    fn from(s: LabelScores) -> Self {
        let [poor, fair, good, excellent] = s.values;
        LabelScoresRaw { poor, fair, good, excellent }
    }
}

impl LabelScores {
    /// Scores indexed in label order (Poor, Fair, Good, Excellent).
    pub fn new(values: [f64; 4]) -> Result<Self, GenerationError> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(GenerationError::InvalidScores("log-likelihoods must be finite".into()));
        }
        Ok(LabelScores { values })
    }

    pub fn get(&self, label: UnifiedLabel) -> f64 {
        self.values[label.index()]
    }

    pub fn values(&self) -> [f64; 4] {
        self.values
    }

    /// Highest-scoring label; ties resolve to the lower label.
    pub fn argmax(&self) -> UnifiedLabel {
        let mut best = 0;
        for i in 1..4 {
            if self.values[i] > self.values[best] {
                best = i;
            }
        }
        UnifiedLabel::ALL[best]
    }

    /// Softmax over the four scores, in label order.
    pub fn softmax(&self) -> [f64; 4] {
        let max = self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps = self.values.map(|v| (v - max).exp());
        let sum: f64 = exps.iter().sum();
        exps.map(|e| e / sum)
    }
}

/// `exp(s_chosen) / Σ exp(s_label)`, evaluated with max-subtraction.
pub fn compute_confidence(scores: &LabelScores, chosen: UnifiedLabel) -> f64 {
    scores.softmax()[chosen.index()]
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StructuredPrognosis {
    pub summary: String,
    pub label: UnifiedLabel,
    pub rationale: String,
    /// Citation tags such as `E1`, in order of first appearance.
    pub cited_evidence_tags: Vec<String>,
    pub warnings: Vec<String>,
}

fn header_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?im)^[\s>*#_]*(summary|prognosis|rationale)[*_]*\s*:[*_]*").unwrap())
}

fn tag_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\[E(\d+)\]").unwrap())
}

/// Splits the two-part output. Never panics; malformed text yields
/// [`GenerationError::Unparseable`] carrying the raw output.
pub fn parse_output(raw: &str, evidence_tags: &[String]) -> Result<StructuredPrognosis, GenerationError> {
    let unparseable = |missing| GenerationError::Unparseable { missing, raw: raw.to_string() };
    let headers: Vec<(String, usize, usize)> = header_re()
        .captures_iter(raw)
        .map(|c| {
            let m = c.get(0).unwrap();
            (c[1].to_lowercase(), m.start(), m.end())
        })
        .collect();
    let section = |name: &str| -> Option<String> {
        let i = headers.iter().position(|h| h.0 == name)?;
        let end = headers.get(i + 1).map_or(raw.len(), |h| h.1);
        Some(raw[headers[i].2..end].trim().to_string())
    };

    let label_text = section("prognosis").ok_or_else(|| unparseable("PROGNOSIS line"))?;
    let first_line = label_text.lines().next().unwrap_or("");
    let label = first_line
        .split(|c: char| !c.is_alphabetic())
        .find_map(|w| w.parse::<UnifiedLabel>().ok())
        .ok_or_else(|| unparseable("outcome label"))?;
    let summary = section("summary").filter(|s| !s.is_empty()).ok_or_else(|| unparseable("SUMMARY section"))?;
    let rationale =
        section("rationale").filter(|s| !s.is_empty()).ok_or_else(|| unparseable("RATIONALE section"))?;

    let supplied: BTreeSet<&str> = evidence_tags.iter().map(String::as_str).collect();
    let mut cited = Vec::new();
    let mut warnings = Vec::new();
    for c in tag_re().captures_iter(&format!("{summary}\n{rationale}")) {
        let tag = format!("E{}", &c[1]);
        if !supplied.contains(tag.as_str()) {
            let w = format!("dropped unknown citation tag [{tag}]");
            if !warnings.contains(&w) {
                tracing::warn!(%tag, "citation tag not among supplied evidence");
                warnings.push(w);
            }
        } else if !cited.contains(&tag) {
            cited.push(tag);
        }
    }
    Ok(StructuredPrognosis { summary, label, rationale, cited_evidence_tags: cited, warnings })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub backoff_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy { max_attempts: 3, backoff_ms: 250 }
    }
}

/// Calls the backend, retrying retriable transport errors with linear backoff.
pub fn generate(
    backend: &dyn GenerationBackend,
    input: &GenerationInput,
    retry: RetryPolicy,
) -> Result<String, GenerationError> {
    let attempts = retry.max_attempts.max(1);
    for attempt in 1..=attempts {
        match backend.generate(input) {
            Ok(text) if text.trim().is_empty() => return Err(GenerationError::EmptyOutput),
            Ok(text) => return Ok(text),
            Err(e) if e.is_retriable() => {
                tracing::warn!(attempt, error = %e, "generation attempt failed");
                if attempt < attempts {
                    std::thread::sleep(Duration::from_millis(retry.backoff_ms * attempt as u64));
                }
            }
            Err(e) => return Err(e),
        }
    }
    Err(GenerationError::Timeout { attempts })
}

/// Generates and parses, re-prompting once when the first output is unparseable.
pub fn generate_structured(
    backend: &dyn GenerationBackend,
    input: &GenerationInput,
    retry: RetryPolicy,
) -> Result<(StructuredPrognosis, String), GenerationError> {
    let raw = generate(backend, input, retry)?;
    match parse_output(&raw, &input.evidence_tags) {
        Ok(p) => Ok((p, raw)),
        Err(GenerationError::Unparseable { .. }) => {
            tracing::warn!("unparseable output, re-prompting once");
            let raw = generate(backend, input, retry)?;
            let mut p = parse_output(&raw, &input.evidence_tags)?;
            p.warnings.push("first output unparseable; re-prompted once".into());
            Ok((p, raw))
        }
        Err(e) => Err(e),
    }
}

/// Label scores when supported, `None` otherwise (never a fabricated value).
pub fn score_labels(
    backend: &dyn GenerationBackend,
    input: &GenerationInput,
) -> Result<Option<LabelScores>, GenerationError> {
    if !backend.capabilities().supports_label_scoring {
        return Ok(None);
    }
    backend.score_labels(input).map(Some)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicU32, Ordering};

    fn tags(n: usize) -> Vec<String> {
        (1..=n).map(|i| format!("E{i}")).collect()
    }

    #[test]
    fn parses_well_formed_output() {
        let raw = "SUMMARY: Tibial osteomyelitis, two debridements [E2].\nPROGNOSIS: Good\nRATIONALE: Normal WBC [E1]; see [E2].";
        let p = parse_output(raw, &tags(3)).unwrap();
        assert_eq!(p.label, UnifiedLabel::Good);
        assert_eq!(p.summary, "Tibial osteomyelitis, two debridements [E2].");
        assert_eq!(p.rationale, "Normal WBC [E1]; see [E2].");
        assert_eq!(p.cited_evidence_tags, ["E2", "E1"]);
        assert!(p.warnings.is_empty());
    }

    #[test]
    fn label_is_case_insensitive() {
        for word in ["GOOD", "good", "Good", "gOoD", "**Good**."] {
            let raw = format!("SUMMARY: s\nPROGNOSIS: {word}\nRATIONALE: r");
            assert_eq!(parse_output(&raw, &[]).unwrap().label, UnifiedLabel::Good, "{word}");
        }
        let raw = "**Summary:** s\n**Prognosis:** excellent\n**Rationale:** r";
        assert_eq!(parse_output(raw, &[]).unwrap().label, UnifiedLabel::Excellent);
    }

    #[test]
    fn unknown_tags_are_dropped_with_warning() {
        let raw = "SUMMARY: s\nPROGNOSIS: Fair\nRATIONALE: see [E9] and [E1] and [E9]";
        let p = parse_output(raw, &tags(3)).unwrap();
        assert_eq!(p.cited_evidence_tags, ["E1"]);
        assert_eq!(p.warnings, ["dropped unknown citation tag [E9]"]);
    }

    #[test]
    fn missing_label_is_unparseable() {
        let cases = [
            "",
            "SUMMARY: s\nRATIONALE: r",
            "PROGNOSIS: Good",
            "SUMMARY: s\nPROGNOSIS: uncertain\nRATIONALE: r",
        ];
        for raw in cases {
            match parse_output(raw, &[]) {
                Err(GenerationError::Unparseable { raw: kept, .. }) => assert_eq!(kept, raw),
                other => panic!("{raw:?} gave {other:?}"),
            }
        }
    }

    #[test]
    fn first_label_word_wins() {
        let raw = "SUMMARY: s\nPROGNOSIS: very poor (not good)\nRATIONALE: r";
        assert_eq!(parse_output(raw, &[]).unwrap().label, UnifiedLabel::Poor);
    }

    #[test]
    fn confidence_examples() {
        let uniform = LabelScores::new([-1.0; 4]).unwrap();
        for l in UnifiedLabel::ALL {
            assert!((compute_confidence(&uniform, l) - 0.25).abs() < 1e-12);
        }
        let l3 = -(3f64.ln());
        let s = LabelScores::new([0.0, l3, l3, l3]).unwrap();
        assert!((compute_confidence(&s, UnifiedLabel::Poor) - 0.5).abs() < 1e-12);
        assert!((compute_confidence(&s, UnifiedLabel::Good) - 1.0 / 6.0).abs() < 1e-12);
        assert!(LabelScores::new([0.0, f64::NAN, 0.0, 0.0]).is_err());
    }

    #[test]
    fn large_scores_do_not_overflow() {
        let s = LabelScores::new([1000.0, 999.0, -1000.0, 0.0]).unwrap();
        let c = s.softmax();
        assert!(c.iter().all(|v| v.is_finite()));
        assert!((c.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn scores_serialize_by_label_name() {
        let s = LabelScores::new([0.0, -1.0, -2.0, -3.0]).unwrap();
        let j = serde_json::to_string(&s).unwrap();
        assert_eq!(j, r#"{"poor":0.0,"fair":-1.0,"good":-2.0,"excellent":-3.0}"#);
        assert_eq!(serde_json::from_str::<LabelScores>(&j).unwrap(), s);
    }

    struct Flaky {
        calls: AtomicU32,
        fail_first: u32,
        output: &'static str,
    }

    impl GenerationBackend for Flaky {
        fn capabilities(&self) -> BackendCapabilities {
            BackendCapabilities { supports_label_scoring: false, deterministic: true, name: "flaky".into(), max_in_flight: 1 }
        }

        fn generate(&self, _input: &GenerationInput) -> Result<String, GenerationError> {
            let n = self.calls.fetch_add(1, Ordering::SeqCst);
            if n < self.fail_first {
                Err(GenerationError::Transport { message: "timeout".into(), retriable: true })
            } else if n == self.fail_first && self.output == "garbled-once" {
                Ok("no structure here".into())
            } else if self.output == "garbled-once" {
                Ok("SUMMARY: s\nPROGNOSIS: Fair\nRATIONALE: r".into())
            } else {
                Ok(self.output.into())
            }
        }
    }

    fn input() -> GenerationInput {
        use crate::prompting::{assemble_generation_input, template_fill, PromptTemplate};
        let t = PromptTemplate::default();
        assemble_generation_input(&template_fill(&crate::model::IndicatorSet::all_missing(), &t), &[], &t)
    }

    const FAST: RetryPolicy = RetryPolicy { max_attempts: 3, backoff_ms: 0 };

    #[test]
    fn retries_then_times_out_with_attempt_count() {
        let b = Flaky { calls: AtomicU32::new(0), fail_first: 10, output: "" };
        assert!(matches!(generate(&b, &input(), FAST), Err(GenerationError::Timeout { attempts: 3 })));
        assert_eq!(b.calls.load(Ordering::SeqCst), 3);
        let b = Flaky { calls: AtomicU32::new(0), fail_first: 2, output: "SUMMARY: s\nPROGNOSIS: Good\nRATIONALE: r" };
        assert!(generate(&b, &input(), FAST).is_ok());
    }

    #[test]
    fn empty_output_is_an_error() {
        let b = Flaky { calls: AtomicU32::new(0), fail_first: 0, output: "  \n" };
        assert!(matches!(generate(&b, &input(), FAST), Err(GenerationError::EmptyOutput)));
    }

    #[test]
    fn reprompts_once_on_unparseable_output() {
        let b = Flaky { calls: AtomicU32::new(0), fail_first: 0, output: "garbled-once" };
        let (p, _) = generate_structured(&b, &input(), FAST).unwrap();
        assert_eq!(p.label, UnifiedLabel::Fair);
        assert_eq!(b.calls.load(Ordering::SeqCst), 2);
        let b = Flaky { calls: AtomicU32::new(0), fail_first: 0, output: "still garbled" };
        assert!(matches!(generate_structured(&b, &input(), FAST), Err(GenerationError::Unparseable { .. })));
        assert_eq!(b.calls.load(Ordering::SeqCst), 2);
    }

    #[test]
    fn unsupported_scoring_yields_none() {
        let b = Flaky { calls: AtomicU32::new(0), fail_first: 0, output: "x" };
        assert!(score_labels(&b, &input()).unwrap().is_none());
        assert!(matches!(b.score_labels(&input()), Err(GenerationError::Unsupported { .. })));
    }
}
