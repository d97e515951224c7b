//! End-to-end orchestration.
//!
//! [`Engine`] holds the configured components and runs one case through
//! normalize → segment → extract → template → embed → search → assemble →
//! generate → parse → score. [`Service`] adds the case store, per-case
//! locking, what-if exploration and replay on top.

mod service;
mod store;

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{BackendMode, ConfigError, PipelineConfig};
use crate::embedding::{Embedder, EmbeddingProvider};
use crate::eval::AblationVariant;
use crate::extraction::{
    chunk_case, extract_indicators, modality_presence, ExtractionError, ExtractorBackend, RuleExtractor, RuleSet,
    SegmentationPolicy,
};
use crate::generation::{
    compute_confidence, generate_structured, score_labels, GenerationBackend, GenerationError, MockBackend,
    MockRuleTable, RemoteChatBackend,
};
use crate::model::{
    validate_case, Finding, IndicatorCategory, IndicatorKey, IndicatorSet, IndicatorValue, Modality, PatientCase,
    PrognosisResult,
};
use crate::prompting::{assemble_generation_input, template_fill, GenerationInput, PatientPrompt, PromptTemplate};
use crate::retrieval::{
    build_index, load_index, parse_corpus, search_topk, CorpusCategory, CorpusEntry, EvidencePassage, VectorIndex,
};

pub use service::{CaseView, Delta, ReplayCheck, Service, WhatIf};
pub use store::{case_id_for, CaseStore};

pub const DEFAULT_CORPUS: &str = include_str!("../../assets/corpus.v1.jsonl");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Validate,
    Normalize,
    Extract,
    Embed,
    Retrieve,
    Generate,
    Parse,
    Score,
    Persist,
    Replay,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Stage::Validate => "validate",
            Stage::Normalize => "normalize",
            Stage::Extract => "extract",
            Stage::Embed => "embed",
            Stage::Retrieve => "retrieve",
            Stage::Generate => "generate",
            Stage::Parse => "parse",
            Stage::Score => "score",
            Stage::Persist => "persist",
            Stage::Replay => "replay",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("case {case_id}: {stage} stage failed: {message}")]
    Stage {
        stage: Stage,
        case_id: String,
        message: String,
        /// Indicators extracted before the failure, when any.
        partial: Option<Box<IndicatorSet>>,
    },
    #[error("case {case_id} is invalid: {}", join_findings(findings))]
    Validation { case_id: String, findings: Vec<Finding> },
    #[error("unknown case \"{0}\"")]
    NotFound(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("pipeline setup failed: {0}")]
    Setup(String),
    #[error("case store error on {path}: {message}")]
    Store { path: String, message: String },
}

fn join_findings(findings: &[Finding]) -> String {
    findings.iter().map(ToString::to_string).collect::<Vec<_>>().join("; ")
}

impl PipelineError {
    /// Domain or input problems, as opposed to I/O and backend failures.
    pub fn is_validation(&self) -> bool {
        match self {
            PipelineError::Validation { .. } | PipelineError::NotFound(_) => true,
            PipelineError::Config(ConfigError::Invalid(_) | ConfigError::Parse { .. }) => true,
            PipelineError::Stage { stage, .. } => *stage == Stage::Validate,
            _ => false,
        }
    }

    fn stage(stage: Stage, case_id: &str, message: impl ToString) -> Self {
        PipelineError::Stage { stage, case_id: case_id.to_string(), message: message.to_string(), partial: None }
    }
}

/// Per-request knobs; unset fields fall back to the engine configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PredictOptions {
    pub variant: AblationVariant,
    pub k: Option<usize>,
}

/// A result together with the artifacts that produced it.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub result: PrognosisResult,
    pub generation_input: GenerationInput,
    pub raw_output: String,
    /// Retrieval operations issued for this case.
    pub retrieval_calls: u64,
}

pub struct Engine {
    config: PipelineConfig,
    embedder: Box<dyn Embedder>,
    index: Arc<VectorIndex>,
    extractor: Box<dyn ExtractorBackend>,
    generator: Box<dyn GenerationBackend>,
    template: PromptTemplate,
    policy: SegmentationPolicy,
    retrieval_calls: AtomicU64,
}

impl fmt::Debug for Engine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Engine")
            .field("embedder", &self.embedder.name())
            .field("index", &self.index.handle())
            .field("extractor", &self.extractor.capabilities().name)
            .field("generator", &self.generator.capabilities().name)
            .finish()
    }
}

fn setup(e: impl fmt::Display) -> PipelineError {
    PipelineError::Setup(e.to_string())
}

/// Loads the configured corpus, or the built-in one.
pub fn load_corpus(config: &PipelineConfig) -> Result<Vec<CorpusEntry>, PipelineError> {
    match &config.paths.corpus {
        Some(path) => crate::retrieval::ingest_corpus(path).map_err(setup),
        None => parse_corpus(DEFAULT_CORPUS.as_bytes()).map_err(setup),
    }
}

impl Engine {
    /// Builds every component named by `config`. The index is loaded from
    /// `paths.index` when set, otherwise built in memory from the corpus.
    /// A loaded index fixes the dimension of the local hash embedder.
    pub fn from_config(mut config: PipelineConfig) -> Result<Engine, PipelineError> {
        config.validate()?;
        let loaded = config.paths.index.as_ref().map(load_index).transpose().map_err(setup)?;
        if let Some(index) = &loaded {
            if config.embedding.provider == EmbeddingProvider::HashLocal && index.dim() != config.embedding.dim {
                tracing::debug!(from = config.embedding.dim, to = index.dim(), "hash embedder adopts index dimension");
                config.embedding.dim = index.dim();
            }
        }
        let embedder = config.embedding.build().map_err(setup)?;
        let index = match loaded {
            Some(index) => index,
            None => build_index(load_corpus(&config)?, embedder.as_ref(), config.retrieval.backend, config.retrieval.hnsw)
                .map_err(setup)?,
        };
        Self::with_index(config, embedder, Arc::new(index))
    }

    /// Like [`from_config`](Self::from_config) with a caller-supplied index.
    pub fn with_index(
        config: PipelineConfig,
        embedder: Box<dyn Embedder>,
        index: Arc<VectorIndex>,
    ) -> Result<Engine, PipelineError> {
        if index.dim() != embedder.dim() {
            return Err(PipelineError::Setup(format!(
                "index dimension {} does not match embedder dimension {}",
                index.dim(),
                embedder.dim()
            )));
        }
        let rules = match &config.paths.extraction_rules {
            Some(p) => RuleSet::from_path(p).map_err(setup)?,
            None => RuleSet::default(),
        };
        let template = match &config.paths.prompt_template {
            Some(p) => PromptTemplate::from_path(p).map_err(setup)?,
            None => PromptTemplate::default(),
        };
        let generator: Box<dyn GenerationBackend> = match config.generation.mode {
            BackendMode::Mock => {
                let table = match &config.generation.mock_rules {
                    Some(p) => MockRuleTable::from_path(p).map_err(setup)?,
                    None => MockRuleTable::default(),
                };
                Box::new(MockBackend::new(table))
            }
            BackendMode::Remote => {
                let remote = config.generation.remote.clone().ok_or_else(|| setup("remote mode without endpoint"))?;
                Box::new(RemoteChatBackend::new(remote).map_err(setup)?)
            }
        };
        let policy = SegmentationPolicy::new(config.max_chunk_chars).map_err(setup)?;
        Ok(Engine {
            config,
            embedder,
            index,
            extractor: Box::new(RuleExtractor::new(rules)),
            generator,
            template,
            policy,
            retrieval_calls: AtomicU64::new(0),
        })
    }

    pub fn with_generator(mut self, generator: Box<dyn GenerationBackend>) -> Self {
        self.generator = generator;
        self
    }

    pub fn with_extractor(mut self, extractor: Box<dyn ExtractorBackend>) -> Self {
        self.extractor = extractor;
        self
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn index(&self) -> &VectorIndex {
        &self.index
    }

    pub fn embedder(&self) -> &dyn Embedder {
        self.embedder.as_ref()
    }

    pub fn template(&self) -> &PromptTemplate {
        &self.template
    }

    pub fn max_in_flight(&self) -> usize {
        self.config.max_in_flight.min(self.generator.capabilities().max_in_flight).max(1)
    }

    /// `(embedder, extractor, generator)` names.
    pub fn backend_names(&self) -> BTreeMap<&'static str, String> {
        BTreeMap::from([
            ("embedder", self.embedder.name()),
            ("extractor", self.extractor.capabilities().name),
            ("generator", self.generator.capabilities().name),
        ])
    }

    /// Retrieval operations issued by this engine since construction.
    pub fn retrieval_calls(&self) -> u64 {
        self.retrieval_calls.load(Ordering::Relaxed)
    }

    /// Free-text corpus search, as exposed by the HTTP API.
    pub fn search_text(
        &self,
        query: &str,
        k: usize,
        filter: Option<&[CorpusCategory]>,
    ) -> Result<Vec<EvidencePassage>, PipelineError> {
        let q = self.embedder.embed(query).map_err(|e| PipelineError::stage(Stage::Embed, "-", e))?;
        self.retrieval_calls.fetch_add(1, Ordering::Relaxed);
        search_topk(&self.index, &q, k, filter).map_err(|e| PipelineError::stage(Stage::Retrieve, "-", e))
    }

    pub fn predict(&self, case: &PatientCase, opts: PredictOptions) -> Result<PrognosisResult, PipelineError> {
        self.predict_traced(case, opts).map(|p| p.result)
    }

    pub fn predict_traced(&self, case: &PatientCase, opts: PredictOptions) -> Result<Prediction, PipelineError> {
        self.run(case, opts, &[])
    }

    /// Prediction with indicator slots replaced after extraction.
    pub fn predict_with_overrides(
        &self,
        case: &PatientCase,
        opts: PredictOptions,
        overrides: &[IndicatorValue],
    ) -> Result<Prediction, PipelineError> {
        self.run(case, opts, overrides)
    }

    /// Indicators only, with the same modality handling as a prediction.
    pub fn extract(&self, case: &PatientCase, variant: AblationVariant) -> Result<IndicatorSet, PipelineError> {
        let id = case.patient_id.as_str();
        let view = view_for(case, variant);
        let chunks = chunk_case(&view, &self.policy).map_err(|e| PipelineError::stage(Stage::Normalize, id, e))?;
        let mut set = extract_indicators(&view, &chunks, self.extractor.as_ref()).map_err(|e| match e {
            ExtractionError::Partial { partial, diagnostic } => PipelineError::Stage {
                stage: Stage::Extract,
                case_id: id.to_string(),
                message: diagnostic,
                partial: Some(partial),
            },
            e => PipelineError::stage(Stage::Extract, id, e),
        })?;
        if variant == AblationVariant::NoPetCt {
            for key in IndicatorKey::RADIOLOGICAL {
                set.clear(key);
            }
        }
        Ok(set)
    }

    fn effective_k(&self, opts: PredictOptions) -> usize {
        if opts.variant.uses_retrieval() {
            opts.k.unwrap_or(self.config.retrieval.k)
        } else {
            0
        }
    }

    fn run(&self, case: &PatientCase, opts: PredictOptions, overrides: &[IndicatorValue]) -> Result<Prediction, PipelineError> {
        let id = case.patient_id.as_str();
        let findings = validate_case(case);
        if !findings.is_empty() {
            return Err(PipelineError::Validation { case_id: id.to_string(), findings });
        }
        let mut indicators = self.extract(case, opts.variant)?;
        for o in overrides {
            let findings = o.validate();
            if !findings.is_empty() {
                return Err(PipelineError::Validation { case_id: id.to_string(), findings });
            }
            indicators.set(o.clone());
        }
        let prompt = template_fill(&indicators, &self.template);

        let k = self.effective_k(opts);
        let (evidence, retrieval_calls) = if opts.variant.uses_retrieval() && k > 0 {
            self.retrieve(id, &prompt, k)?
        } else {
            (Vec::new(), 0)
        };
        let input = assemble_generation_input(&prompt, &evidence, &self.template);

        let (parsed, raw) = generate_structured(self.generator.as_ref(), &input, self.config.generation.retry)
            .map_err(|e| {
                let stage = if matches!(e, GenerationError::Unparseable { .. }) { Stage::Parse } else { Stage::Generate };
                PipelineError::Stage { stage, case_id: id.into(), message: e.to_string(), partial: Some(Box::new(indicators.clone())) }
            })?;
        let scores = score_labels(self.generator.as_ref(), &input).map_err(|e| PipelineError::stage(Stage::Score, id, e))?;
        let confidence = scores.as_ref().map(|s| compute_confidence(s, parsed.label));
        let scored_argmax = scores.as_ref().map(|s| s.argmax());
        let label_disagreement = scored_argmax.is_some_and(|a| a != parsed.label);

        let mut warnings = parsed.warnings;
        let presence = modality_presence(case, self.embedder.dim());
        let absent: Vec<&str> = presence.placeholders.keys().map(|m| m.as_str()).collect();
        if !absent.is_empty() {
            warnings.push(format!("absent modalities: {}", absent.join(", ")));
        }
        if opts.variant == AblationVariant::NoPetCt && case.has_modality(Modality::PetCtReport) {
            warnings.push("PET-CT documents excluded by the no-petct variant".into());
        }
        if let Some(a) = scored_argmax.filter(|_| label_disagreement) {
            warnings.push(format!("parsed label {} differs from highest-scoring label {a}", parsed.label));
        }
        let cited_evidence = parsed
            .cited_evidence_tags
            .iter()
            .filter_map(|t| input.evidence_tags.iter().position(|x| x == t))
            .map(|i| evidence[i].entry_id.clone())
            .collect();

        let result = PrognosisResult {
            patient_id: case.patient_id.clone(),
            summary: parsed.summary,
            label: parsed.label,
            rationale: parsed.rationale,
            confidence,
            label_scores: scores,
            scored_argmax,
            label_disagreement,
            evidence,
            cited_evidence,
            indicator_snapshot: indicators,
            variant: opts.variant,
            schema_version: self.template.schema_version.clone(),
            backend: self.generator.capabilities().name,
            retrieval_k: k,
            input_digest: input.digest(),
            warnings,
        };
        tracing::debug!(case = id, label = %result.label, variant = %opts.variant, "prediction complete");
        Ok(Prediction { result, generation_input: input, raw_output: raw, retrieval_calls })
    }

    fn queries(&self, prompt: &PatientPrompt) -> Vec<String> {
        if !self.config.retrieval.per_category_queries {
            return vec![prompt.query_text()];
        }
        let groups = [
            IndicatorCategory::InfectionSurgicalHistory,
            IndicatorCategory::ClinicalBiomarker,
            IndicatorCategory::RadiologicalIndicator,
        ];
        let per_group: Vec<String> = groups
            .iter()
            .filter_map(|g| {
                let keys: Vec<IndicatorKey> = IndicatorKey::ALL.into_iter().filter(|k| k.category() == *g).collect();
                prompt.query_text_for(&keys)
            })
            .collect();
        if per_group.is_empty() {
            vec![prompt.summary_text.clone()]
        } else {
            per_group
        }
    }

    fn retrieve(&self, id: &str, prompt: &PatientPrompt, k: usize) -> Result<(Vec<EvidencePassage>, u64), PipelineError> {
        let filter = self.config.retrieval.filter.as_deref();
        let mut best: BTreeMap<String, EvidencePassage> = BTreeMap::new();
        let mut calls = 0;
        for q in self.queries(prompt) {
            let v = self.embedder.embed(&q).map_err(|e| PipelineError::stage(Stage::Embed, id, e))?;
            calls += 1;
            self.retrieval_calls.fetch_add(1, Ordering::Relaxed);
            for p in search_topk(&self.index, &v, k, filter).map_err(|e| PipelineError::stage(Stage::Retrieve, id, e))? {
                match best.get(&p.entry_id) {
                    Some(prev) if prev.score >= p.score => {}
                    _ => {
                        best.insert(p.entry_id.clone(), p);
                    }
                }
            }
        }
        let mut merged: Vec<EvidencePassage> = best.into_values().collect();
        merged.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.entry_id.cmp(&b.entry_id)));
        merged.truncate(k);
        for (i, p) in merged.iter_mut().enumerate() {
            p.rank = i + 1;
        }
        Ok((merged, calls))
    }

    /// Rebuilds the generation input of a stored result from its snapshot and
    /// evidence, failing if the digest no longer matches.
    pub fn replay(&self, result: &PrognosisResult) -> Result<GenerationInput, PipelineError> {
        let fail = |m: String| PipelineError::stage(Stage::Replay, &result.patient_id, m);
        if result.schema_version != self.template.schema_version {
            return Err(fail(format!(
                "result uses template {} but the engine has {}",
                result.schema_version, self.template.schema_version
            )));
        }
        let prompt = template_fill(&result.indicator_snapshot, &self.template);
        let input = assemble_generation_input(&prompt, &result.evidence, &self.template);
        let digest = input.digest();
        if digest != result.input_digest {
            return Err(fail(format!("digest mismatch: stored {} rebuilt {digest}", result.input_digest)));
        }
        Ok(input)
    }
}

fn view_for(case: &PatientCase, variant: AblationVariant) -> PatientCase {
    if variant == AblationVariant::NoPetCt {
        case.without_modality(Modality::PetCtReport)
    } else {
        case.clone()
    }
}

/// Reads a case bundle (a JSON-encoded [`PatientCase`]).
pub fn read_case(path: impl AsRef<Path>) -> Result<PatientCase, PipelineError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)
        .map_err(|e| PipelineError::Store { path: path.display().to_string(), message: e.to_string() })?;
    serde_json::from_str(&text).map_err(|e| PipelineError::Validation {
        case_id: path.display().to_string(),
        findings: vec![Finding::new("bundle", e.to_string())],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ClinicalDocument, UnifiedLabel};

    fn engine() -> Engine {
        Engine::from_config(PipelineConfig::default()).unwrap()
    }

    fn clean_recovery() -> PatientCase {
        PatientCase {
            patient_id: "p-clean".into(),
            documents: vec![
                ClinicalDocument {
                    id: "ehr".into(),
                    modality: Modality::EhrRecord,
                    timestamp: None,
                    raw_text: "Intervention history: One prior debridement was documented. The implant was removed.\n\
                               Laboratory findings: WBC 6.1 ×10⁹/L."
                        .into(),
                    image_ref: None,
                },
                ClinicalDocument {
                    id: "pet".into(),
                    modality: Modality::PetCtReport,
                    timestamp: None,
                    raw_text: "SUVmax 9.0 / 2.5. No shift in SUVmax location.".into(),
                    image_ref: None,
                },
            ],
            reference_scores: None,
        }
    }

    #[test]
    fn clean_recovery_is_excellent_with_evidence() {
        let r = engine().predict(&clean_recovery(), PredictOptions::default()).unwrap();
        assert_eq!(r.label, UnifiedLabel::Excellent);
        assert_eq!(r.evidence.len(), 5);
        assert!(!r.cited_evidence.is_empty());
        assert!(r.confidence.unwrap() > 0.8);
    }

    #[test]
    fn empty_case_still_predicts() {
        let case = PatientCase { patient_id: "empty".into(), documents: vec![], reference_scores: None };
        let p = engine().predict_traced(&case, PredictOptions::default()).unwrap();
        assert_eq!(p.result.indicator_snapshot.documented_count(), 0);
        assert!(p.result.confidence.is_some());
        assert!(p.generation_input.patient_prompt.slot_lines.iter().all(|l| l.ends_with("Not documented")));
    }

    #[test]
    fn no_retrieval_has_no_evidence_or_calls() {
        let e = engine();
        let p = e
            .predict_traced(&clean_recovery(), PredictOptions { variant: AblationVariant::NoRetrieval, k: None })
            .unwrap();
        assert!(p.result.evidence.is_empty());
        assert_eq!(p.retrieval_calls, 0);
        assert_eq!(e.retrieval_calls(), 0);
        assert!(p.generation_input.render().contains("No external evidence retrieved"));
    }

    #[test]
    fn no_petct_forces_radiological_missing() {
        let r = engine()
            .predict(&clean_recovery(), PredictOptions { variant: AblationVariant::NoPetCt, k: None })
            .unwrap();
        for key in IndicatorKey::RADIOLOGICAL {
            assert!(r.indicator_snapshot.value(key).is_missing());
        }
        assert!(!r.evidence.is_empty());
    }

    #[test]
    fn replay_matches_and_detects_tampering() {
        let e = engine();
        let mut r = e.predict(&clean_recovery(), PredictOptions::default()).unwrap();
        assert_eq!(e.replay(&r).unwrap().digest(), r.input_digest);
        r.evidence[0].title.push('!');
        assert!(e.replay(&r).is_err());
    }

    #[test]
    fn per_category_queries_merge_hits() {
        let mut config = PipelineConfig::default();
        config.retrieval.per_category_queries = true;
        let e = Engine::from_config(config).unwrap();
        let p = e.predict_traced(&clean_recovery(), PredictOptions::default()).unwrap();
        assert_eq!(p.retrieval_calls, 3);
        assert_eq!(p.result.evidence.len(), 5);
        let ranks: Vec<usize> = p.result.evidence.iter().map(|e| e.rank).collect();
        assert_eq!(ranks, [1, 2, 3, 4, 5]);
    }

    #[test]
    fn invalid_case_is_a_validation_error() {
        let mut case = clean_recovery();
        case.documents[1].id = "ehr".into();
        let err = engine().predict(&case, PredictOptions::default()).unwrap_err();
        assert!(err.is_validation(), "{err}");
    }
}
