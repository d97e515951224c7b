//! Deterministic rule-table generator for offline runs and tests.
//!
//! Rules are tried in order and the first whose conditions all hold decides
//! the label, the label score profile and the canned rationale. Conditions on
//! an undocumented indicator never hold.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{BackendCapabilities, GenerationBackend, GenerationError, LabelScores};
use crate::model::{IndicatorKey, IndicatorSet, UnifiedLabel, Value};
use crate::prompting::{render_value, GenerationInput};

pub const DEFAULT_MOCK_RULES: &str = include_str!("../../assets/mock_rules.v1.json");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case", deny_unknown_fields)]
pub enum Condition {
    Ge { key: IndicatorKey, value: f64 },
    Gt { key: IndicatorKey, value: f64 },
    Le { key: IndicatorKey, value: f64 },
    Lt { key: IndicatorKey, value: f64 },
    IsTrue { key: IndicatorKey },
    IsFalse { key: IndicatorKey },
    /// Pre/post pair with `post < pre`.
    Decreasing { key: IndicatorKey },
    Increasing { key: IndicatorKey },
    Documented { key: IndicatorKey },
    Missing { key: IndicatorKey },
    EvidencePresent,
    EvidenceAbsent,
}

impl Condition {
    fn holds(&self, set: &IndicatorSet, has_evidence: bool) -> bool {
        let scalar = |k: &IndicatorKey| set.value(*k).scalar();
        let flag = |k: &IndicatorKey| match set.value(*k) {
            Value::Boolean { value } => Some(*value),
            _ => None,
        };
        let pair = |k: &IndicatorKey| match set.value(*k) {
            Value::PrePostPair { pre, post, .. } => Some((*pre, *post)),
            _ => None,
        };
        match self {
            Condition::Ge { key, value } => scalar(key).is_some_and(|x| x >= *value),
            Condition::Gt { key, value } => scalar(key).is_some_and(|x| x > *value),
            Condition::Le { key, value } => scalar(key).is_some_and(|x| x <= *value),
            Condition::Lt { key, value } => scalar(key).is_some_and(|x| x < *value),
            Condition::IsTrue { key } => flag(key) == Some(true),
            Condition::IsFalse { key } => flag(key) == Some(false),
            Condition::Decreasing { key } => pair(key).is_some_and(|(pre, post)| post < pre),
            Condition::Increasing { key } => pair(key).is_some_and(|(pre, post)| post > pre),
            Condition::Documented { key } => !set.value(*key).is_missing(),
            Condition::Missing { key } => set.value(*key).is_missing(),
            Condition::EvidencePresent => has_evidence,
            Condition::EvidenceAbsent => !has_evidence,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MockRule {
    pub name: String,
    #[serde(default)]
    pub when: Vec<Condition>,
    pub label: UnifiedLabel,
    pub scores: LabelScores,
    pub rationale: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MockRuleTable {
    pub version: String,
    pub rules: Vec<MockRule>,
    pub fallback: MockRule,
}

impl MockRuleTable {
    pub fn from_json(text: &str) -> Result<Self, GenerationError> {
        let t: MockRuleTable = serde_json::from_str(text).map_err(|e| GenerationError::Rules(e.to_string()))?;
        if !t.fallback.when.is_empty() {
            return Err(GenerationError::Rules("fallback rule must not have conditions".into()));
        }
        for r in t.rules.iter().chain(std::iter::once(&t.fallback)) {
            if r.scores.argmax() != r.label {
                return Err(GenerationError::Rules(format!(
                    "rule \"{}\" labels {} but its scores peak at {}",
                    r.name,
                    r.label,
                    r.scores.argmax()
                )));
            }
        }
        Ok(t)
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self, GenerationError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| GenerationError::Rules(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// First matching rule, else the fallback.
    pub fn decide(&self, set: &IndicatorSet, has_evidence: bool) -> &MockRule {
        self.rules
            .iter()
            .find(|r| r.when.iter().all(|c| c.holds(set, has_evidence)))
            .unwrap_or(&self.fallback)
    }
}

impl Default for MockRuleTable {
    fn default() -> Self {
        MockRuleTable::from_json(DEFAULT_MOCK_RULES).expect("shipped mock rules parse")
    }
}

#[derive(Debug, Clone, Default)]
pub struct MockBackend {
    table: MockRuleTable,
}

impl MockBackend {
    pub fn new(table: MockRuleTable) -> Self {
        MockBackend { table }
    }

    pub fn table(&self) -> &MockRuleTable {
        &self.table
    }

    fn rule_for(&self, input: &GenerationInput) -> &MockRule {
        self.table.decide(&input.patient_prompt.indicators, input.has_evidence())
    }
}

impl GenerationBackend for MockBackend {
    fn capabilities(&self) -> BackendCapabilities {
        BackendCapabilities {
            supports_label_scoring: true,
            deterministic: true,
            name: format!("mock-{}", self.table.version),
            max_in_flight: usize::MAX,
        }
    }

    fn generate(&self, input: &GenerationInput) -> Result<String, GenerationError> {
        let rule = self.rule_for(input);
        let set = &input.patient_prompt.indicators;
        let documented: Vec<String> = set
            .iter()
            .filter(|v| !v.value.is_missing())
            .map(|v| format!("{}: {}", v.key.name(), render_value(&v.value, "")))
            .collect();
        let mut summary = input.patient_prompt.summary_text.clone();
        if !documented.is_empty() {
            summary.push_str(" Documented findings: ");
            summary.push_str(&documented.join("; "));
            summary.push('.');
        }
        let support = if input.has_evidence() {
            "Supporting evidence: [E1]."
        } else {
            "No external evidence was available; the assessment relies on the patient indicators alone."
        };
        Ok(format!("SUMMARY: {summary}\nPROGNOSIS: {}\nRATIONALE: {} {support}\n", rule.label, rule.rationale))
    }

    fn score_labels(&self, input: &GenerationInput) -> Result<LabelScores, GenerationError> {
        Ok(self.rule_for(input).scores)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generation::{compute_confidence, parse_output};
    use crate::model::IndicatorValue;
    use crate::prompting::{assemble_generation_input, template_fill, PromptTemplate};
    use crate::retrieval::{CorpusCategory, EvidencePassage};

    fn input(set: &IndicatorSet, evidence: bool) -> GenerationInput {
        let t = PromptTemplate::default();
        let passages = if evidence {
            vec![EvidencePassage {
                entry_id: "o-1".into(),
                score: 0.5,
                rank: 1,
                category: CorpusCategory::OutcomeStudy,
                title: "t".into(),
                text_snippet: "x".into(),
                source: "s".into(),
            }]
        } else {
            vec![]
        };
        assemble_generation_input(&template_fill(set, &t), &passages, &t)
    }

    fn with(values: Vec<(IndicatorKey, Value)>) -> IndicatorSet {
        let mut set = IndicatorSet::all_missing();
        for (k, v) in values {
            set.set(IndicatorValue::manual(k, v));
        }
        set
    }

    #[test]
    fn clean_recovery_is_confidently_excellent() {
        let set = with(vec![
            (IndicatorKey::SuvMaxPrePost, Value::PrePostPair { pre: 10.4, post: 2.1, unit: String::new() }),
            (IndicatorKey::WbcCount, Value::Number { value: 6.2, unit: String::new() }),
            (IndicatorKey::PriorDebridementCount, Value::Count { count: 1 }),
        ]);
        let b = MockBackend::default();
        let gi = input(&set, true);
        let p = parse_output(&b.generate(&gi).unwrap(), &gi.evidence_tags).unwrap();
        assert_eq!(p.label, UnifiedLabel::Excellent);
        assert_eq!(p.cited_evidence_tags, ["E1"]);
        let c = compute_confidence(&b.score_labels(&gi).unwrap(), p.label);
        assert!(c >= 0.8, "{c}");
    }

    #[test]
    fn all_missing_falls_back_to_flat_fair() {
        let b = MockBackend::default();
        let gi = input(&IndicatorSet::all_missing(), false);
        let p = parse_output(&b.generate(&gi).unwrap(), &gi.evidence_tags).unwrap();
        assert_eq!(p.label, UnifiedLabel::Fair);
        let conf = b.score_labels(&gi).unwrap().softmax();
        assert!(conf.iter().all(|c| (0.2..0.32).contains(c)), "{conf:?}");
        assert!(p.cited_evidence_tags.is_empty());
    }

    #[test]
    fn output_is_deterministic() {
        let b = MockBackend::default();
        let gi = input(&with(vec![(IndicatorKey::WbcCount, Value::Number { value: 14.0, unit: String::new() })]), true);
        assert_eq!(b.generate(&gi).unwrap(), b.generate(&gi).unwrap());
    }

    #[test]
    fn rule_order_decides() {
        let t = MockRuleTable::default();
        let poor = with(vec![
            (IndicatorKey::PriorDebridementCount, Value::Count { count: 3 }),
            (IndicatorKey::SuvMaxLocationShift, Value::Boolean { value: true }),
            (IndicatorKey::WbcCount, Value::Number { value: 5.0, unit: String::new() }),
        ]);
        assert_eq!(t.decide(&poor, false).label, UnifiedLabel::Poor);
        let wbc = |v: f64| with(vec![(IndicatorKey::WbcCount, Value::Number { value: v, unit: String::new() })]);
        assert_eq!(t.decide(&wbc(14.0), true).label, UnifiedLabel::Fair);
        assert_eq!(t.decide(&wbc(7.0), true).label, UnifiedLabel::Good);
        let retained = with(vec![
            (IndicatorKey::ImplantRemovalStatus, Value::Boolean { value: false }),
            (IndicatorKey::WbcCount, Value::Number { value: 12.0, unit: String::new() }),
        ]);
        assert_eq!(t.decide(&retained, true).label, UnifiedLabel::Poor);
        assert_eq!(t.decide(&retained, false).label, UnifiedLabel::Fair);
    }

    #[test]
    fn inconsistent_tables_are_rejected() {
        let mut t = MockRuleTable::default();
        t.rules[0].label = UnifiedLabel::Excellent;
        let json = serde_json::to_string(&t).unwrap();
        assert!(MockRuleTable::from_json(&json).is_err());
        assert!(MockRuleTable::from_json(r#"{"version":"x","rules":[{"name":"a","when":[{"op":"near","key":"wbc_count"}],"label":"good","scores":{"poor":0,"fair":0,"good":1,"excellent":0},"rationale":"r"}],"fallback":{"name":"f","label":"fair","scores":{"poor":0,"fair":1,"good":0,"excellent":0},"rationale":"r"}}"#).is_err());
    }
}
