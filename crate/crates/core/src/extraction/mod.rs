//! Document normalization, chunking and indicator extraction.
//!
//! Extraction runs per document through an [`ExtractorBackend`]; candidate
//! values are then merged into one [`IndicatorSet`]. When several chunks
//! mention the same indicator the value from the most recent document wins
//! (latest timestamp, then later position in the case), and the provenance
//! lists every mentioning chunk. Radiological indicators are only accepted
//! from PET-CT report chunks.

mod rules;
mod segment;

use std::collections::{BTreeMap, HashMap};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::EmbeddingVector;
use crate::model::{
    ChunkRef, ClinicalDocument, DocumentChunk, ExtractionMethod, IndicatorKey, IndicatorSet, IndicatorValue,
    Modality, PatientCase, Value,
};

pub use rules::{RuleExtractor, RuleSet, DEFAULT_RULES, WBC_UNIT};
pub use segment::{
    normalize_document, normalize_text, segment_chunks, NormalizedDocument, Section, SectionLabel,
    SegmentationPolicy, DEFAULT_MAX_CHUNK_CHARS, MIN_CHUNK_CHARS,
};

#[derive(Debug, Error)]
pub enum ExtractionError {
    #[error("document \"{doc_id}\" has neither text nor image reference")]
    UnusableDocument { doc_id: String },
    #[error("max_chunk_chars must be at least {min} (got {got})")]
    InvalidPolicy { min: usize, got: usize },
    #[error("invalid rule table: {0}")]
    Rules(String),
    #[error("extractor backend failed on document \"{doc_id}\": {message}")]
    Backend { doc_id: String, message: String },
    #[error("extraction incomplete: {diagnostic}")]
    Partial { partial: Box<IndicatorSet>, diagnostic: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractorCapabilities {
    pub supports_image: bool,
    pub deterministic: bool,
    pub name: String,
    /// Concurrent document calls the backend tolerates.
    pub max_in_flight: usize,
}

/// One indicator mention found by a backend.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub key: IndicatorKey,
    pub value: Value,
    pub chunk: ChunkRef,
}

pub trait ExtractorBackend: Send + Sync {
    fn capabilities(&self) -> ExtractorCapabilities;

    /// Candidates for one document given its chunks. May be called concurrently
    /// for different documents up to `max_in_flight`.
    fn extract_document(
        &self,
        doc: &ClinicalDocument,
        chunks: &[DocumentChunk],
    ) -> Result<Vec<Candidate>, ExtractionError>;

    /// Method recorded on values this backend produces.
    fn method(&self) -> ExtractionMethod {
        ExtractionMethod::ModelBacked
    }
}

/// Normalizes and segments every usable document of a case. Documents without
/// text (image-only) yield an empty chunk list.
pub fn chunk_case(
    case: &PatientCase,
    policy: &SegmentationPolicy,
) -> Result<BTreeMap<String, Vec<DocumentChunk>>, ExtractionError> {
    let mut out = BTreeMap::new();
    for doc in &case.documents {
        let normalized = normalize_document(doc)?;
        out.insert(doc.id.clone(), segment_chunks(&normalized, policy));
    }
    Ok(out)
}

struct Ranked {
    candidate: Candidate,
    timestamp: Option<NaiveDate>,
    doc_order: usize,
}

/// Reduces ranked candidates into a set; later entries in `(timestamp, doc_order, chunk)` order win.
fn merge(mut ranked: Vec<Ranked>, method: ExtractionMethod) -> IndicatorSet {
    ranked.sort_by(|a, b| {
        a.timestamp
            .cmp(&b.timestamp)
            .then(a.doc_order.cmp(&b.doc_order))
            .then(a.candidate.chunk.chunk_index.cmp(&b.candidate.chunk.chunk_index))
    });
    let mut winners: HashMap<IndicatorKey, Value> = HashMap::new();
    let mut provenance: HashMap<IndicatorKey, Vec<(usize, ChunkRef)>> = HashMap::new();
    for r in ranked {
        let key = r.candidate.key;
        let refs = provenance.entry(key).or_default();
        if !refs.iter().any(|(_, c)| *c == r.candidate.chunk) {
            refs.push((r.doc_order, r.candidate.chunk));
        }
        winners.insert(key, r.candidate.value);
    }
    let mut set = IndicatorSet::all_missing();
    for (key, value) in winners {
        let mut refs = provenance.remove(&key).unwrap_or_default();
        refs.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.chunk_index.cmp(&b.1.chunk_index)));
        set.set(IndicatorValue {
            key,
            value,
            provenance: refs.into_iter().map(|(_, c)| c).collect(),
            extraction_method: method,
        });
    }
    set
}

/// Fills the indicator schema for `case` from its chunks.
///
/// Candidates that are invalid, point outside the supplied chunks, or carry a
/// radiological key from a non-PET-CT document are discarded. On backend
/// failure the error carries the set merged from the documents that succeeded.
pub fn extract_indicators(
    case: &PatientCase,
    chunks: &BTreeMap<String, Vec<DocumentChunk>>,
    backend: &dyn ExtractorBackend,
) -> Result<IndicatorSet, ExtractionError> {
    let caps = backend.capabilities();
    let docs: Vec<(usize, &ClinicalDocument, &[DocumentChunk])> = case
        .documents
        .iter()
        .enumerate()
        .map(|(i, d)| (i, d, chunks.get(&d.id).map(Vec::as_slice).unwrap_or(&[])))
        .collect();

    let width = caps.max_in_flight.clamp(1, 8);
    let mut results: Vec<(usize, Result<Vec<Candidate>, ExtractionError>)> = Vec::with_capacity(docs.len());
    for group in docs.chunks(width) {
        if group.len() == 1 || width == 1 {
            for &(i, d, c) in group {
                results.push((i, backend.extract_document(d, c)));
            }
            continue;
        }
        std::thread::scope(|s| {
            let handles: Vec<_> =
                group.iter().map(|&(i, d, c)| (i, s.spawn(move || backend.extract_document(d, c)))).collect();
            for (i, h) in handles {
                let r = h.join().unwrap_or_else(|_| {
                    Err(ExtractionError::Backend { doc_id: case.documents[i].id.clone(), message: "panicked".into() })
                });
                results.push((i, r));
            }
        });
    }

    let mut ranked = Vec::new();
    let mut failures = Vec::new();
    for (i, result) in results {
        let doc = &case.documents[i];
        let doc_chunks = docs[i].2;
        match result {
            Ok(candidates) => {
                for c in candidates {
                    let known = c.chunk.doc_id == doc.id && doc_chunks.iter().any(|k| k.chunk_index == c.chunk.chunk_index);
                    if !known {
                        tracing::warn!(doc = %doc.id, key = %c.key, "candidate provenance outside supplied chunks");
                        continue;
                    }
                    if c.key.is_radiological() && doc.modality != Modality::PetCtReport {
                        continue;
                    }
                    if c.value.is_missing() || c.value.validate().is_err() {
                        continue;
                    }
                    ranked.push(Ranked { candidate: c, timestamp: doc.timestamp, doc_order: i });
                }
            }
            Err(e) => failures.push(e.to_string()),
        }
    }
    let set = merge(ranked, backend.method());
    if failures.is_empty() {
        Ok(set)
    } else {
        Err(ExtractionError::Partial { partial: Box::new(set), diagnostic: failures.join("; ") })
    }
}

/// Pure pattern extraction over a flat chunk list, ordered as given.
pub fn extract_with_rules(chunks: &[DocumentChunk], rules: &RuleSet) -> IndicatorSet {
    let ranked = chunks
        .iter()
        .enumerate()
        .flat_map(|(order, chunk)| {
            rules.match_chunk(chunk).into_iter().map(move |(key, value)| Ranked {
                candidate: Candidate { key, value, chunk: chunk.reference() },
                timestamp: None,
                doc_order: order,
            })
        })
        .collect();
    merge(ranked, ExtractionMethod::RuleBased)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModalityPresence {
    pub present: BTreeMap<Modality, bool>,
    /// Zero vectors standing in for absent modalities. Never used for retrieval.
    pub placeholders: BTreeMap<Modality, EmbeddingVector>,
}

pub fn modality_presence(case: &PatientCase, dim: usize) -> ModalityPresence {
    let mut present = BTreeMap::new();
    let mut placeholders = BTreeMap::new();
    for m in Modality::ALL {
        let has = case.has_modality(m);
        present.insert(m, has);
        if !has {
            placeholders.insert(m, EmbeddingVector::null(dim));
        }
    }
    ModalityPresence { present, placeholders }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn doc(id: &str, modality: Modality, date: Option<&str>, text: &str) -> ClinicalDocument {
        ClinicalDocument {
            id: id.into(),
            modality,
            timestamp: date.map(|d| d.parse().unwrap()),
            raw_text: text.into(),
            image_ref: None,
        }
    }

    fn case(docs: Vec<ClinicalDocument>) -> PatientCase {
        PatientCase { patient_id: "p".into(), documents: docs, reference_scores: None }
    }

    fn run(c: &PatientCase) -> IndicatorSet {
        let chunks = chunk_case(c, &SegmentationPolicy::default()).unwrap();
        extract_indicators(c, &chunks, &RuleExtractor::default()).unwrap()
    }

    #[test]
    fn petct_pair_has_provenance() {
        let c = case(vec![doc("pet", Modality::PetCtReport, None, "SUVmax 8.2 pre-debridement, 3.1 post.")]);
        let set = run(&c);
        let v = set.get(IndicatorKey::SuvMaxPrePost);
        assert_eq!(v.value, Value::PrePostPair { pre: 8.2, post: 3.1, unit: String::new() });
        assert_eq!(v.provenance, vec![ChunkRef { doc_id: "pet".into(), chunk_index: 0 }]);
        assert!(set.validate().is_empty());
    }

    #[test]
    fn radiology_outside_petct_is_ignored() {
        let c = case(vec![doc("ehr", Modality::EhrRecord, None, "SUVmax 8.2 / 3.1. WBC 9.0 ×10⁹/L. Shift in SUVmax location.")]);
        let set = run(&c);
        for k in IndicatorKey::RADIOLOGICAL {
            assert!(set.value(k).is_missing(), "{k}");
        }
        assert!(!set.value(IndicatorKey::WbcCount).is_missing());
    }

    #[test]
    fn latest_timestamp_wins_and_provenance_lists_both() {
        let c = case(vec![
            doc("late", Modality::FollowUpNote, Some("2023-05-02"), "WBC 9.5 ×10⁹/L."),
            doc("early", Modality::EhrRecord, Some("2023-01-10"), "WBC 11.0 ×10⁹/L."),
        ]);
        let v = run(&c).get(IndicatorKey::WbcCount).clone();
        assert_eq!(v.value, Value::Number { value: 9.5, unit: WBC_UNIT.into() });
        let ids: Vec<_> = v.provenance.iter().map(|r| r.doc_id.as_str()).collect();
        assert_eq!(ids, ["late", "early"]);
    }

    #[test]
    fn document_order_breaks_timestamp_ties() {
        let c = case(vec![
            doc("a", Modality::EhrRecord, None, "WBC 11.0 ×10⁹/L."),
            doc("b", Modality::FollowUpNote, None, "WBC 8.0 ×10⁹/L."),
        ]);
        assert_eq!(run(&c).value(IndicatorKey::WbcCount).scalar(), Some(8.0));
    }

    #[test]
    fn empty_inputs_are_all_missing() {
        assert_eq!(extract_with_rules(&[], &RuleSet::default()), IndicatorSet::all_missing());
        assert_eq!(run(&case(vec![])), IndicatorSet::all_missing());
    }

    #[test]
    fn rules_extraction_is_deterministic() {
        let c = case(vec![doc("d", Modality::EhrRecord, None, "Cierny-Mader type III, host B. two prior debridements.")]);
        let chunks: Vec<_> = chunk_case(&c, &SegmentationPolicy::default()).unwrap().into_values().flatten().collect();
        let rules = RuleSet::default();
        let a = extract_with_rules(&chunks, &rules);
        assert_eq!(a, extract_with_rules(&chunks, &rules));
        assert_eq!(a.value(IndicatorKey::CiernyMaderClass), &Value::Text { text: "III-B".into() });
        assert_eq!(a.value(IndicatorKey::PriorDebridementCount), &Value::Count { count: 2 });
    }

    struct Failing;

    impl ExtractorBackend for Failing {
        fn capabilities(&self) -> ExtractorCapabilities {
            ExtractorCapabilities { supports_image: false, deterministic: true, name: "failing".into(), max_in_flight: 4 }
        }

        fn extract_document(&self, doc: &ClinicalDocument, chunks: &[DocumentChunk]) -> Result<Vec<Candidate>, ExtractionError> {
            if doc.id == "bad" {
                return Err(ExtractionError::Backend { doc_id: doc.id.clone(), message: "boom".into() });
            }
            RuleExtractor::default().extract_document(doc, chunks)
        }
    }

    #[test]
    fn backend_failure_returns_partial_set() {
        let c = case(vec![
            doc("good", Modality::EhrRecord, None, "WBC 7.0 ×10⁹/L."),
            doc("bad", Modality::EhrRecord, None, "two prior debridements"),
        ]);
        let chunks = chunk_case(&c, &SegmentationPolicy::default()).unwrap();
        match extract_indicators(&c, &chunks, &Failing) {
            Err(ExtractionError::Partial { partial, diagnostic }) => {
                assert_eq!(partial.value(IndicatorKey::WbcCount).scalar(), Some(7.0));
                assert!(partial.value(IndicatorKey::PriorDebridementCount).is_missing());
                assert!(diagnostic.contains("boom"));
                assert_eq!(partial.get(IndicatorKey::WbcCount).extraction_method, ExtractionMethod::ModelBacked);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn presence_pads_absent_modalities() {
        let c = case(vec![doc("e", Modality::EhrRecord, None, "x"), doc("p", Modality::PetCtReport, None, "y")]);
        let p = modality_presence(&c, 16);
        assert_eq!(p.placeholders.len(), 1);
        let ph = &p.placeholders[&Modality::FollowUpNote];
        assert!(ph.is_null() && ph.dim() == 16 && ph.values().iter().all(|&v| v == 0.0));
        assert_eq!(modality_presence(&case(vec![]), 8).placeholders.len(), 3);
        let full = case(vec![
            doc("e", Modality::EhrRecord, None, "x"),
            doc("p", Modality::PetCtReport, None, "y"),
            doc("f", Modality::FollowUpNote, None, "z"),
        ]);
        let p = modality_presence(&full, 8);
        assert!(p.placeholders.is_empty() && p.present.values().all(|&b| b));
    }
}
