use std::collections::{BTreeMap, HashMap};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use super::store::CaseStore;
use super::{Engine, PipelineError, PredictOptions, Stage};
use crate::model::{
    validate_case, ExtractionMethod, IndicatorKey, IndicatorSet, IndicatorValue, PatientCase, PrognosisResult,
    UnifiedLabel, Value,
};

/// Stored case with its latest indicators and full prediction history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseView {
    pub case_id: String,
    pub case: PatientCase,
    pub indicators: Option<IndicatorSet>,
    pub history: Vec<PrognosisResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Delta {
    pub label_changed: bool,
    pub baseline_label: UnifiedLabel,
    pub modified_label: UnifiedLabel,
    pub confidence_change: Option<f64>,
    pub overridden: Vec<IndicatorKey>,
    pub evidence_added: Vec<String>,
    pub evidence_removed: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WhatIf {
    pub baseline: PrognosisResult,
    pub modified: PrognosisResult,
    pub delta: Delta,
    /// Always true: the modified result is not written to the case history.
    pub exploratory: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayCheck {
    pub position: usize,
    pub input_digest: String,
    pub ok: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Engine plus case store. Predictions for one case are serialized; reads
/// take no lock.
#[derive(Debug)]
pub struct Service {
    engine: Arc<Engine>,
    store: CaseStore,
    locks: Mutex<HashMap<String, Arc<Mutex<()>>>>,
}

impl Service {
    pub fn new(engine: Arc<Engine>, store: CaseStore) -> Self {
        Service { engine, store, locks: Mutex::new(HashMap::new()) }
    }

    pub fn engine(&self) -> &Arc<Engine> {
        &self.engine
    }

    pub fn store(&self) -> &CaseStore {
        &self.store
    }

    fn lock_for(&self, id: &str) -> Arc<Mutex<()>> {
        let mut map = self.locks.lock().unwrap_or_else(|p| p.into_inner());
        map.entry(id.to_string()).or_default().clone()
    }

    /// Validates and stores a bundle. Re-ingesting identical content returns the same id.
    pub fn ingest_case(&self, case: &PatientCase) -> Result<String, PipelineError> {
        let findings = validate_case(case);
        if !findings.is_empty() {
            return Err(PipelineError::Validation { case_id: case.patient_id.clone(), findings });
        }
        let (id, created) = self.store.put_case(case)?;
        tracing::info!(case_id = %id, created, "case ingested");
        Ok(id)
    }

    pub fn case_view(&self, id: &str) -> Result<CaseView, PipelineError> {
        Ok(CaseView {
            case_id: id.to_string(),
            case: self.store.get_case(id)?,
            indicators: self.store.indicators(id)?,
            history: self.store.history(id)?,
        })
    }

    /// Predicts and appends the result to the case history.
    pub fn predict(&self, id: &str, opts: PredictOptions) -> Result<PrognosisResult, PipelineError> {
        let case = self.store.get_case(id)?;
        let lock = self.lock_for(id);
        let _guard = lock.lock().unwrap_or_else(|p| p.into_inner());
        self.predict_locked(id, &case, opts)
    }

    fn predict_locked(&self, id: &str, case: &PatientCase, opts: PredictOptions) -> Result<PrognosisResult, PipelineError> {
        match self.engine.predict_traced(case, opts) {
            Ok(p) => {
                let persist = |e: PipelineError| PipelineError::Stage {
                    stage: Stage::Persist,
                    case_id: id.to_string(),
                    message: e.to_string(),
                    partial: None,
                };
                self.store.save_indicators(id, &p.result.indicator_snapshot).map_err(persist)?;
                self.store.append_result(id, &p.result).map_err(persist)?;
                Ok(p.result)
            }
            Err(PipelineError::Stage { stage, message, partial: Some(partial), .. }) => {
                if let Err(e) = self.store.save_partial(id, &partial) {
                    tracing::warn!(case_id = id, error = %e, "could not persist partial indicators");
                }
                Err(PipelineError::Stage { stage, case_id: id.to_string(), message, partial: Some(partial) })
            }
            Err(e) => Err(e),
        }
    }

    /// Latest stored result produced under the engine's current settings for `opts`.
    fn matching_baseline(&self, id: &str, opts: PredictOptions) -> Result<Option<PrognosisResult>, PipelineError> {
        let k = self.engine.effective_k(opts);
        let backend = self.engine.backend_names()["generator"].clone();
        let schema = self.engine.template().schema_version.clone();
        Ok(self.store.history(id)?.into_iter().rev().find(|r| {
            r.variant == opts.variant && r.retrieval_k == k && r.backend == backend && r.schema_version == schema
        }))
    }

    /// Re-predicts with manual overrides. The baseline comes from history (or
    /// is computed and stored if absent); the modified result is never stored.
    pub fn what_if(
        &self,
        id: &str,
        overrides: &BTreeMap<IndicatorKey, Value>,
        opts: PredictOptions,
    ) -> Result<WhatIf, PipelineError> {
        let case = self.store.get_case(id)?;
        let overrides: Vec<IndicatorValue> = overrides
            .iter()
            .map(|(k, v)| IndicatorValue {
                key: *k,
                value: v.clone(),
                provenance: Vec::new(),
                extraction_method: ExtractionMethod::ManualOverride,
            })
            .collect();
        for o in &overrides {
            let findings = o.validate();
            if !findings.is_empty() {
                return Err(PipelineError::Validation { case_id: id.to_string(), findings });
            }
        }
        let baseline = {
            let lock = self.lock_for(id);
            let _guard = lock.lock().unwrap_or_else(|p| p.into_inner());
            match self.matching_baseline(id, opts)? {
                Some(b) => b,
                None => self.predict_locked(id, &case, opts)?,
            }
        };
        let modified = self.engine.predict_with_overrides(&case, opts, &overrides)?.result;
        let ids = |r: &PrognosisResult| r.evidence.iter().map(|e| e.entry_id.clone()).collect::<Vec<_>>();
        let (before, after) = (ids(&baseline), ids(&modified));
        let delta = Delta {
            label_changed: baseline.label != modified.label,
            baseline_label: baseline.label,
            modified_label: modified.label,
            confidence_change: baseline.confidence.zip(modified.confidence).map(|(b, m)| m - b),
            overridden: overrides.iter().map(|o| o.key).collect(),
            evidence_added: after.iter().filter(|e| !before.contains(e)).cloned().collect(),
            evidence_removed: before.iter().filter(|e| !after.contains(e)).cloned().collect(),
        };
        Ok(WhatIf { baseline, modified, delta, exploratory: true })
    }

    /// Re-renders every stored result of a case and checks its digest.
    pub fn replay(&self, id: &str) -> Result<Vec<ReplayCheck>, PipelineError> {
        Ok(self
            .store
            .history(id)?
            .iter()
            .enumerate()
            .map(|(position, r)| {
                let outcome = self.engine.replay(r);
                ReplayCheck {
                    position,
                    input_digest: r.input_digest.clone(),
                    ok: outcome.is_ok(),
                    error: outcome.err().map(|e| e.to_string()),
                }
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::PipelineConfig;
    use crate::eval::generate_synthetic_cohort;

    fn service(dir: &std::path::Path) -> Service {
        let engine = Engine::from_config(PipelineConfig::default()).unwrap();
        Service::new(Arc::new(engine), CaseStore::open(dir).unwrap())
    }

    #[test]
    fn history_is_append_only_and_replays() {
        let dir = tempfile::tempdir().unwrap();
        let svc = service(dir.path());
        let case = generate_synthetic_cohort(42, 8).unwrap().cases.remove(0).case;
        let id = svc.ingest_case(&case).unwrap();
        assert_eq!(svc.ingest_case(&case).unwrap(), id);
        let a = svc.predict(&id, PredictOptions::default()).unwrap();
        let b = svc.predict(&id, PredictOptions::default()).unwrap();
        assert_eq!(a, b);
        let view = svc.case_view(&id).unwrap();
        assert_eq!(view.history.len(), 2);
        assert_eq!(view.indicators.as_ref(), Some(&a.indicator_snapshot));
        assert!(svc.replay(&id).unwrap().iter().all(|c| c.ok));
    }

    #[test]
    fn empty_what_if_is_identity_and_not_stored() {
        let dir = tempfile::tempdir().unwrap();
        let svc = service(dir.path());
        let case = generate_synthetic_cohort(42, 8).unwrap().cases.remove(3).case;
        let id = svc.ingest_case(&case).unwrap();
        let w = svc.what_if(&id, &BTreeMap::new(), PredictOptions::default()).unwrap();
        assert_eq!(serde_json::to_string(&w.baseline).unwrap(), serde_json::to_string(&w.modified).unwrap());
        assert!(!w.delta.label_changed);
        assert_eq!(svc.case_view(&id).unwrap().history.len(), 1);
    }

    #[test]
    fn negative_count_override_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let svc = service(dir.path());
        let case = generate_synthetic_cohort(42, 8).unwrap().cases.remove(0).case;
        let id = svc.ingest_case(&case).unwrap();
        let overrides = BTreeMap::from([(IndicatorKey::PriorDebridementCount, Value::Count { count: -1 })]);
        let err = svc.what_if(&id, &overrides, PredictOptions::default()).unwrap_err();
        assert!(err.is_validation());
        assert!(matches!(svc.what_if("case-ffffffffffffffff", &BTreeMap::new(), PredictOptions::default()), Err(PipelineError::NotFound(_))));
    }
}
