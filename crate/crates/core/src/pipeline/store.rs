//! Directory-backed case persistence.
//!
//! ```text
//! <root>/<case_id>/case.json          the ingested bundle
//! <root>/<case_id>/indicators.json    latest extracted indicator set
//! <root>/<case_id>/partial.json       indicators saved by the last failed run
//! <root>/<case_id>/history.jsonl      one PrognosisResult per line, append-only
//! ```

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use super::PipelineError;
use crate::model::{IndicatorSet, PatientCase, PrognosisResult};

const CASE_FILE: &str = "case.json";
const INDICATORS_FILE: &str = "indicators.json";
const PARTIAL_FILE: &str = "partial.json";
const HISTORY_FILE: &str = "history.jsonl";

/// `case-` followed by the first 16 hex digits of the bundle's content hash.
pub fn case_id_for(case: &PatientCase) -> String {
    let bytes = serde_json::to_vec(case).expect("case serializes");
    let digest = hex::encode(Sha256::digest(&bytes));
    format!("case-{}", &digest[..16])
}

#[derive(Debug, Clone)]
pub struct CaseStore {
    root: PathBuf,
}

fn store_err(path: &Path, e: impl ToString) -> PipelineError {
    PipelineError::Store { path: path.display().to_string(), message: e.to_string() }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), PipelineError> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| store_err(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| store_err(path, e))
}

fn valid_id(id: &str) -> bool {
    !id.is_empty() && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
}

impl CaseStore {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, PipelineError> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(|e| store_err(&root, e))?;
        Ok(CaseStore { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn dir(&self, id: &str) -> Result<PathBuf, PipelineError> {
        if !valid_id(id) {
            return Err(PipelineError::NotFound(id.to_string()));
        }
        Ok(self.root.join(id))
    }

    pub fn contains(&self, id: &str) -> bool {
        self.dir(id).map(|d| d.join(CASE_FILE).is_file()).unwrap_or(false)
    }

    /// Stores `case` under its content id. Returns the id and whether it was new.
    pub fn put_case(&self, case: &PatientCase) -> Result<(String, bool), PipelineError> {
        let id = case_id_for(case);
        if self.contains(&id) {
            return Ok((id, false));
        }
        let dir = self.dir(&id)?;
        fs::create_dir_all(&dir).map_err(|e| store_err(&dir, e))?;
        let json = serde_json::to_vec_pretty(case).expect("case serializes");
        write_atomic(&dir.join(CASE_FILE), &json)?;
        Ok((id, true))
    }

    pub fn get_case(&self, id: &str) -> Result<PatientCase, PipelineError> {
        let path = self.dir(id)?.join(CASE_FILE);
        let text = fs::read_to_string(&path).map_err(|_| PipelineError::NotFound(id.to_string()))?;
        serde_json::from_str(&text).map_err(|e| store_err(&path, e))
    }

    pub fn list(&self) -> Result<Vec<String>, PipelineError> {
        let mut ids: Vec<String> = fs::read_dir(&self.root)
            .map_err(|e| store_err(&self.root, e))?
            .filter_map(|e| e.ok())
            .filter(|e| e.path().join(CASE_FILE).is_file())
            .filter_map(|e| e.file_name().into_string().ok())
            .collect();
        ids.sort();
        Ok(ids)
    }

    pub fn save_indicators(&self, id: &str, set: &IndicatorSet) -> Result<(), PipelineError> {
        let json = serde_json::to_vec_pretty(set).expect("indicators serialize");
        write_atomic(&self.dir(id)?.join(INDICATORS_FILE), &json)
    }

    pub fn save_partial(&self, id: &str, set: &IndicatorSet) -> Result<(), PipelineError> {
        let json = serde_json::to_vec_pretty(set).expect("indicators serialize");
        write_atomic(&self.dir(id)?.join(PARTIAL_FILE), &json)
    }

    fn read_set(&self, id: &str, file: &str) -> Result<Option<IndicatorSet>, PipelineError> {
        let path = self.dir(id)?.join(file);
        match fs::read_to_string(&path) {
            Ok(text) => serde_json::from_str(&text).map(Some).map_err(|e| store_err(&path, e)),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(store_err(&path, e)),
        }
    }

    pub fn indicators(&self, id: &str) -> Result<Option<IndicatorSet>, PipelineError> {
        self.read_set(id, INDICATORS_FILE)
    }

    pub fn partial(&self, id: &str) -> Result<Option<IndicatorSet>, PipelineError> {
        self.read_set(id, PARTIAL_FILE)
    }

    /// Appends one result line. Callers serialize appends per case.
    pub fn append_result(&self, id: &str, result: &PrognosisResult) -> Result<(), PipelineError> {
        let path = self.dir(id)?.join(HISTORY_FILE);
        let mut line = serde_json::to_string(result).expect("result serializes");
        line.push('\n');
        let mut f = OpenOptions::new().create(true).append(true).open(&path).map_err(|e| store_err(&path, e))?;
        f.write_all(line.as_bytes()).map_err(|e| store_err(&path, e))?;
        f.sync_data().map_err(|e| store_err(&path, e))
    }

    pub fn history(&self, id: &str) -> Result<Vec<PrognosisResult>, PipelineError> {
        let path = self.dir(id)?.join(HISTORY_FILE);
        let text = match fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(store_err(&path, e)),
        };
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .enumerate()
            .map(|(i, l)| serde_json::from_str(l).map_err(|e| store_err(&path, format!("line {}: {e}", i + 1))))
            .collect()
    }
}
