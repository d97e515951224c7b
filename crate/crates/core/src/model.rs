//! Shared domain types: clinical documents, the twelve-slot indicator schema,
//! the unified outcome label and the final prognosis record.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::eval::AblationVariant;
use crate::generation::LabelScores;
use crate::retrieval::EvidencePassage;

pub const LEFS_MAX: i32 = 80;
pub const ENNEKING_MAX: i32 = 30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Modality {
    #[serde(rename = "petct_report")]
    PetCtReport,
    #[serde(rename = "ehr_record")]
    EhrRecord,
    #[serde(rename = "followup_note")]
    FollowUpNote,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::PetCtReport, Modality::EhrRecord, Modality::FollowUpNote];

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::PetCtReport => "petct_report",
            Modality::EhrRecord => "ehr_record",
            Modality::FollowUpNote => "followup_note",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One clinical record of a patient case.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClinicalDocument {
    pub id: String,
    pub modality: Modality,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamp: Option<NaiveDate>,
    #[serde(rename = "text", default)]
    pub raw_text: String,
    /// Opaque pointer to an image payload, forwarded untouched to multimodal backends.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_ref: Option<String>,
}

/// A retrievable text unit of a document. `chunk_index` is contiguous from 0 per document.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DocumentChunk {
    pub doc_id: String,
    pub chunk_index: usize,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub section_label: Option<String>,
}

impl DocumentChunk {
    pub fn reference(&self) -> ChunkRef {
        ChunkRef { doc_id: self.doc_id.clone(), chunk_index: self.chunk_index }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ChunkRef {
    pub doc_id: String,
    pub chunk_index: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReferenceScores {
    pub lefs: i32,
    pub enneking: i32,
}

/// A patient case bundle. Modalities may be missing entirely.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientCase {
    pub patient_id: String,
    #[serde(default)]
    pub documents: Vec<ClinicalDocument>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_scores: Option<ReferenceScores>,
}

impl PatientCase {
    pub fn has_modality(&self, modality: Modality) -> bool {
        self.documents.iter().any(|d| d.modality == modality)
    }

    /// Copy of the case without documents of `modality`.
    pub fn without_modality(&self, modality: Modality) -> PatientCase {
        PatientCase {
            patient_id: self.patient_id.clone(),
            documents: self.documents.iter().filter(|d| d.modality != modality).cloned().collect(),
            reference_scores: self.reference_scores,
        }
    }
}

/// A single invariant violation found by [`validate_case`] or value validation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Finding {
    pub field: String,
    pub message: String,
}

impl Finding {
    pub fn new(field: impl Into<String>, message: impl Into<String>) -> Self {
        Finding { field: field.into(), message: message.into() }
    }
}

impl fmt::Display for Finding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

/// Checks every case-level invariant and returns one finding per violation.
pub fn validate_case(case: &PatientCase) -> Vec<Finding> {
    let mut findings = Vec::new();
    if case.patient_id.trim().is_empty() {
        findings.push(Finding::new("patient_id", "patient_id must be non-empty"));
    }
    let mut seen = HashSet::new();
    for (i, doc) in case.documents.iter().enumerate() {
        let field = format!("documents[{i}]");
        if doc.id.trim().is_empty() {
            findings.push(Finding::new(format!("{field}.id"), "document id must be non-empty"));
        } else if !seen.insert(doc.id.as_str()) {
            findings.push(Finding::new(format!("{field}.id"), format!("duplicate id \"{}\"", doc.id)));
        }
        if doc.raw_text.trim().is_empty() && doc.image_ref.is_none() {
            findings.push(Finding::new(
                format!("{field}.text"),
                "text may be empty only when image_ref is present",
            ));
        }
    }
    if let Some(scores) = case.reference_scores {
        if !(0..=LEFS_MAX).contains(&scores.lefs) {
            findings.push(Finding::new(
                "reference_scores.lefs",
                format!("lefs out of range 0–{LEFS_MAX} (got {})", scores.lefs),
            ));
        }
        if !(0..=ENNEKING_MAX).contains(&scores.enneking) {
            findings.push(Finding::new(
                "reference_scores.enneking",
                format!("enneking out of range 0–{ENNEKING_MAX} (got {})", scores.enneking),
            ));
        }
    }
    findings
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IndicatorCategory {
    InfectionSurgicalHistory,
    ClinicalBiomarker,
    RadiologicalIndicator,
}

/// The twelve expert-defined prognostic indicators, in schema order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IndicatorKey {
    Aetiopathogenesis,
    CiernyMaderClass,
    IndexToDebridementInterval,
    DebridementToRevisionInterval,
    PriorDebridementCount,
    #[serde(rename = "interventions_between_petct_and_reconstruction")]
    InterventionsBetweenPetCtAndReconstruction,
    ImplantRemovalStatus,
    SurgicalStrategy,
    WbcCount,
    #[serde(rename = "suvmax_pre_post")]
    SuvMaxPrePost,
    TlgPrePost,
    #[serde(rename = "suvmax_location_shift")]
    SuvMaxLocationShift,
}

impl IndicatorKey {
    pub const ALL: [IndicatorKey; 12] = [
        IndicatorKey::Aetiopathogenesis,
        IndicatorKey::CiernyMaderClass,
        IndicatorKey::IndexToDebridementInterval,
        IndicatorKey::DebridementToRevisionInterval,
        IndicatorKey::PriorDebridementCount,
        IndicatorKey::InterventionsBetweenPetCtAndReconstruction,
        IndicatorKey::ImplantRemovalStatus,
        IndicatorKey::SurgicalStrategy,
        IndicatorKey::WbcCount,
        IndicatorKey::SuvMaxPrePost,
        IndicatorKey::TlgPrePost,
        IndicatorKey::SuvMaxLocationShift,
    ];

    pub const RADIOLOGICAL: [IndicatorKey; 3] =
        [IndicatorKey::SuvMaxPrePost, IndicatorKey::TlgPrePost, IndicatorKey::SuvMaxLocationShift];

    /// Position in schema order.
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn category(self) -> IndicatorCategory {
        use IndicatorKey::*;
        match self {
            WbcCount => IndicatorCategory::ClinicalBiomarker,
            SuvMaxPrePost | TlgPrePost | SuvMaxLocationShift => IndicatorCategory::RadiologicalIndicator,
            _ => IndicatorCategory::InfectionSurgicalHistory,
        }
    }

    pub fn is_radiological(self) -> bool {
        self.category() == IndicatorCategory::RadiologicalIndicator
    }

    pub fn name(self) -> &'static str {
        use IndicatorKey::*;
        match self {
            Aetiopathogenesis => "Aetiopathogenesis",
            CiernyMaderClass => "Cierny–Mader classification",
            IndexToDebridementInterval => "Index-to-debridement interval",
            DebridementToRevisionInterval => "Debridement-to-revision interval",
            PriorDebridementCount => "Prior debridement count",
            InterventionsBetweenPetCtAndReconstruction => "Interventions between PET-CT and reconstruction",
            ImplantRemovalStatus => "Implant removal status",
            SurgicalStrategy => "Surgical strategy",
            WbcCount => "WBC count",
            SuvMaxPrePost => "SUVmax pre-/post-debridement",
            TlgPrePost => "TLG pre-/post-debridement",
            SuvMaxLocationShift => "SUVmax location shift",
        }
    }

    /// Prognostic relevance of the indicator.
    pub fn description(self) -> &'static str {
        use IndicatorKey::*;
        match self {
            Aetiopathogenesis => "Infection origin and disease mechanism related to recurrence pattern and treatment complexity.",
            CiernyMaderClass => "Severity stratification based on anatomical type and host condition.",
            IndexToDebridementInterval => "Treatment timing signal reflecting disease progression before surgical control.",
            DebridementToRevisionInterval => "Postoperative evolution and need for additional intervention.",
            PriorDebridementCount => "Surgical burden and chronicity of infection.",
            InterventionsBetweenPetCtAndReconstruction => "Complexity of interim management before definitive reconstruction.",
            ImplantRemovalStatus => "Whether potentially infection-associated hardware was removed.",
            SurgicalStrategy => "Overall operative management pathway relevant to expected recovery.",
            WbcCount => "Systemic inflammatory/infectious activity marker.",
            SuvMaxPrePost => "Peak metabolic activity for residual infection assessment and response evaluation.",
            TlgPrePost => "Total metabolic lesion burden related to disease severity.",
            SuvMaxLocationShift => "Spatial change of dominant metabolic focus, indicating persistence or migration of disease.",
        }
    }

    pub fn as_str(self) -> &'static str {
        use IndicatorKey::*;
        match self {
            Aetiopathogenesis => "aetiopathogenesis",
            CiernyMaderClass => "cierny_mader_class",
            IndexToDebridementInterval => "index_to_debridement_interval",
            DebridementToRevisionInterval => "debridement_to_revision_interval",
            PriorDebridementCount => "prior_debridement_count",
            InterventionsBetweenPetCtAndReconstruction => "interventions_between_petct_and_reconstruction",
            ImplantRemovalStatus => "implant_removal_status",
            SurgicalStrategy => "surgical_strategy",
            WbcCount => "wbc_count",
            SuvMaxPrePost => "suvmax_pre_post",
            TlgPrePost => "tlg_pre_post",
            SuvMaxLocationShift => "suvmax_location_shift",
        }
    }
}

impl fmt::Display for IndicatorKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for IndicatorKey {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        IndicatorKey::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| format!("unknown indicator key \"{s}\""))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SchemaEntry {
    pub key: IndicatorKey,
    pub name: &'static str,
    pub category: IndicatorCategory,
    pub description: &'static str,
}

/// The indicator schema in its fixed row order.
pub fn indicator_schema() -> Vec<SchemaEntry> {
    IndicatorKey::ALL
        .into_iter()
        .map(|key| SchemaEntry {
            key,
            name: key.name(),
            category: key.category(),
            description: key.description(),
        })
        .collect()
}

/// Value of one indicator slot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Value {
    Text { text: String },
    Number { value: f64, unit: String },
    Interval { days: i64 },
    Count { count: i64 },
    Boolean { value: bool },
    PrePostPair { pre: f64, post: f64, unit: String },
    Missing,
}

impl Value {
    pub fn is_missing(&self) -> bool {
        matches!(self, Value::Missing)
    }

    /// Scalar view used by numeric comparisons. Pairs, text and booleans have none.
    pub fn scalar(&self) -> Option<f64> {
        match *self {
            Value::Number { value, .. } => Some(value),
            Value::Interval { days } => Some(days as f64),
            Value::Count { count } => Some(count as f64),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        match self {
            Value::Number { value, .. } if !value.is_finite() => Err("number must be finite".into()),
            Value::PrePostPair { pre, post, .. } if !pre.is_finite() || !post.is_finite() => {
                Err("pre/post values must be finite".into())
            }
            Value::Count { count } if *count < 0 => Err(format!("count must be ≥ 0 (got {count})")),
            Value::Interval { days } if *days < 0 => Err(format!("interval must be ≥ 0 days (got {days})")),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtractionMethod {
    RuleBased,
    ModelBacked,
    ManualOverride,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndicatorValue {
    pub key: IndicatorKey,
    pub value: Value,
    #[serde(default)]
    pub provenance: Vec<ChunkRef>,
    pub extraction_method: ExtractionMethod,
}

impl IndicatorValue {
    pub fn missing(key: IndicatorKey) -> Self {
        IndicatorValue { key, value: Value::Missing, provenance: Vec::new(), extraction_method: ExtractionMethod::RuleBased }
    }

    pub fn manual(key: IndicatorKey, value: Value) -> Self {
        IndicatorValue { key, value, provenance: Vec::new(), extraction_method: ExtractionMethod::ManualOverride }
    }

    pub fn validate(&self) -> Vec<Finding> {
        let mut out = Vec::new();
        let field = self.key.as_str();
        if let Err(msg) = self.value.validate() {
            out.push(Finding::new(field, msg));
        }
        if !self.value.is_missing()
            && self.provenance.is_empty()
            && self.extraction_method != ExtractionMethod::ManualOverride
        {
            out.push(Finding::new(field, "documented value without provenance"));
        }
        out
    }
}

/// Exactly one value per indicator key, stored in schema order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<IndicatorValue>", into = "Vec<IndicatorValue>")]
pub struct IndicatorSet {
    slots: Vec<IndicatorValue>,
}

impl IndicatorSet {
    pub fn all_missing() -> Self {
        IndicatorSet { slots: IndicatorKey::ALL.into_iter().map(IndicatorValue::missing).collect() }
    }

    pub fn get(&self, key: IndicatorKey) -> &IndicatorValue {
        &self.slots[key.index()]
    }

    pub fn value(&self, key: IndicatorKey) -> &Value {
        &self.slots[key.index()].value
    }

    pub fn set(&mut self, value: IndicatorValue) {
        let i = value.key.index();
        self.slots[i] = value;
    }

    pub fn clear(&mut self, key: IndicatorKey) {
        self.slots[key.index()] = IndicatorValue::missing(key);
    }

    pub fn iter(&self) -> impl Iterator<Item = &IndicatorValue> {
        self.slots.iter()
    }

    pub fn documented_count(&self) -> usize {
        self.slots.iter().filter(|s| !s.value.is_missing()).count()
    }

    pub fn validate(&self) -> Vec<Finding> {
        self.slots.iter().flat_map(IndicatorValue::validate).collect()
    }
}

impl Default for IndicatorSet {
    fn default() -> Self {
        Self::all_missing()
    }
}

impl TryFrom<Vec<IndicatorValue>> for IndicatorSet {
    type Error = String;

    fn try_from(values: Vec<IndicatorValue>) -> Result<Self, Self::Error> {
        let mut slots: Vec<Option<IndicatorValue>> = vec![None; IndicatorKey::ALL.len()];
        for v in values {
            let i = v.key.index();
            if slots[i].is_some() {
                return Err(format!("indicator {} listed more than once", v.key));
            }
            slots[i] = Some(v);
        }
        let slots = slots
            .into_iter()
            .zip(IndicatorKey::ALL)
            .map(|(slot, key)| slot.ok_or_else(|| format!("indicator {key} missing from set")))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(IndicatorSet { slots })
    }
}

impl From<IndicatorSet> for Vec<IndicatorValue> {
    fn from(set: IndicatorSet) -> Self {
        set.slots
    }
}

/// Unified four-level outcome label, ordered from worst to best.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnifiedLabel {
    Poor,
    Fair,
    Good,
    Excellent,
}

impl UnifiedLabel {
    pub const ALL: [UnifiedLabel; 4] =
        [UnifiedLabel::Poor, UnifiedLabel::Fair, UnifiedLabel::Good, UnifiedLabel::Excellent];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            UnifiedLabel::Poor => "Poor",
            UnifiedLabel::Fair => "Fair",
            UnifiedLabel::Good => "Good",
            UnifiedLabel::Excellent => "Excellent",
        }
    }
}

impl fmt::Display for UnifiedLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for UnifiedLabel {
    type Err = String;

    /// Case-insensitive.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let t = s.trim();
        UnifiedLabel::ALL
            .into_iter()
            .find(|l| l.as_str().eq_ignore_ascii_case(t))
            .ok_or_else(|| format!("unknown outcome label \"{s}\""))
    }
}

/// Final output of one pipeline run, with everything needed to replay its
/// generation input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrognosisResult {
    pub patient_id: String,
    pub summary: String,
    pub label: UnifiedLabel,
    pub rationale: String,
    /// Softmax over forced label log-likelihoods; absent when the backend cannot score labels.
    pub confidence: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label_scores: Option<LabelScores>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scored_argmax: Option<UnifiedLabel>,
    /// Parsed label differs from the argmax of the label scores.
    pub label_disagreement: bool,
    pub evidence: Vec<EvidencePassage>,
    pub cited_evidence: Vec<String>,
    pub indicator_snapshot: IndicatorSet,
    pub variant: AblationVariant,
    pub schema_version: String,
    pub backend: String,
    pub retrieval_k: usize,
    /// SHA-256 of the rendered generation input.
    pub input_digest: String,
    #[serde(default)]
    pub warnings: Vec<String>,
}
