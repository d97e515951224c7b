//! Retrieval-augmented prognostic inference for chronic osteomyelitis.
//!
//! The pipeline turns a bundle of heterogeneous clinical documents (PET-CT
//! reports, EHR records, follow-up notes) into a four-level outcome
//! prediction:
//!
//! 1. [`extraction`] normalizes and chunks documents, then fills the
//!    twelve-slot expert indicator schema ([`model::IndicatorSet`]).
//! 2. [`prompting`] renders the indicators into a slot-filled patient prompt.
//! 3. [`retrieval`] embeds that prompt ([`embedding`]) and pulls the top-k
//!    passages from a categorized evidence corpus.
//! 4. [`generation`] asks a backend for a two-part answer (summary plus
//!    labelled prognosis with rationale), parses it, and derives a confidence
//!    from per-label log-likelihoods.
//! 5. [`eval`] maps LEFS / Enneking scores onto the unified label space and
//!    scores predictions with confusion matrices, Macro-F1 and ablations.
//!
//! [`pipeline`] wires the stages together and persists results, [`server`]
//! exposes them over HTTP and [`cli`] drives them in batch.

pub mod cli;
pub mod config;
pub mod embedding;
pub mod eval;
pub mod extraction;
pub mod generation;
mod limit;
pub mod model;
pub mod pipeline;
pub mod prompting;
pub mod retrieval;
pub mod server;

pub use model::{
    indicator_schema, validate_case, ClinicalDocument, DocumentChunk, IndicatorCategory,
    IndicatorKey, IndicatorSet, IndicatorValue, Modality, PatientCase, PrognosisResult,
    UnifiedLabel, Value,
};
