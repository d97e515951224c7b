//! Categorized evidence corpus, dense index and top-k retrieval.
//!
//! [`search_exact`] scores every entry and is the reference; [`search_topk`]
//! answers from the index's configured backend (exhaustive, or an HNSW
//! graph). Results are ordered by descending cosine score with ties broken
//! by ascending entry id, so truncation to any k is a prefix of a larger k.

mod hnsw;
mod persist;

use std::fmt;
use std::io::BufRead;
use std::path::Path;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::{dot, EmbedError, Embedder, EmbeddingVector};

pub use hnsw::HnswParams;
use hnsw::HnswGraph;
pub use persist::{load_index, save_index, FORMAT_VERSION, MAGIC};

pub const DEFAULT_K: usize = 5;
/// Passage text kept per hit; full text stays addressable by entry id.
pub const SNIPPET_CHARS: usize = 800;
const UNIT_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("I/O error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: duplicate corpus id \"{id}\"")]
    DuplicateId { id: String, line: usize },
    #[error("index requires at least one entry")]
    EmptyCorpus,
    #[error("null vectors cannot be used for retrieval")]
    NullQuery,
    #[error("vector is not unit-norm (norm {norm})")]
    NotUnit { norm: f64 },
    #[error("dimension mismatch: index has {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("embedding failed for entry \"{entry_id}\": {source}")]
    Embed { entry_id: String, source: EmbedError },
    #[error("corrupt index file: {0}")]
    Corrupt(String),
    #[error("incompatible index format version {found} (supported: {supported})")]
    IncompatibleVersion { found: u32, supported: u32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorpusCategory {
    KnowledgeGraph,
    ClinicalGuideline,
    OutcomeStudy,
    SurgicalDecisionSupport,
    RecoveryProtocol,
}

impl CorpusCategory {
    pub const ALL: [CorpusCategory; 5] = [
        CorpusCategory::KnowledgeGraph,
        CorpusCategory::ClinicalGuideline,
        CorpusCategory::OutcomeStudy,
        CorpusCategory::SurgicalDecisionSupport,
        CorpusCategory::RecoveryProtocol,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            CorpusCategory::KnowledgeGraph => "knowledge_graph",
            CorpusCategory::ClinicalGuideline => "clinical_guideline",
            CorpusCategory::OutcomeStudy => "outcome_study",
            CorpusCategory::SurgicalDecisionSupport => "surgical_decision_support",
            CorpusCategory::RecoveryProtocol => "recovery_protocol",
        }
    }

    pub(crate) fn code(self) -> u8 {
        self as u8
    }

    pub(crate) fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }
}

impl fmt::Display for CorpusCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CorpusCategory {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| format!("unknown corpus category \"{s}\""))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusEntry {
    pub id: String,
    pub category: CorpusCategory,
    pub title: String,
    pub text: String,
    pub source: String,
}

impl CorpusEntry {
    /// Text handed to the document encoder.
    pub fn embedding_text(&self) -> String {
        if self.title.is_empty() {
            self.text.clone()
        } else {
            format!("{}. {}", self.title, self.text)
        }
    }
}

/// A scored retrieval hit. Ranks start at 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvidencePassage {
    pub entry_id: String,
    pub score: f64,
    pub rank: usize,
    pub category: CorpusCategory,
    pub title: String,
    pub text_snippet: String,
    pub source: String,
}

pub(crate) fn truncate_chars(text: &str, max: usize) -> &str {
    match text.char_indices().nth(max) {
        Some((i, _)) => &text[..i],
        None => text,
    }
}

/// Reads a line-delimited corpus file (one JSON object per line; blank lines skipped).
pub fn ingest_corpus(path: impl AsRef<Path>) -> Result<Vec<CorpusEntry>, RetrievalError> {
    let path = path.as_ref();
    let file = std::fs::File::open(path)
        .map_err(|source| RetrievalError::Io { path: path.display().to_string(), source })?;
    let entries = parse_corpus(std::io::BufReader::new(file))?;
    tracing::info!(path = %path.display(), count = entries.len(), "corpus ingested");
    Ok(entries)
}

pub fn parse_corpus(reader: impl BufRead) -> Result<Vec<CorpusEntry>, RetrievalError> {
    let mut entries = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| RetrievalError::Parse { line: line_no, message: e.to_string() })?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: CorpusEntry = serde_json::from_str(&line)
            .map_err(|e| RetrievalError::Parse { line: line_no, message: e.to_string() })?;
        if entry.id.trim().is_empty() {
            return Err(RetrievalError::Parse { line: line_no, message: "empty id".into() });
        }
        if entry.text.trim().is_empty() {
            return Err(RetrievalError::Parse { line: line_no, message: format!("entry \"{}\" has empty text", entry.id) });
        }
        if !seen.insert(entry.id.clone()) {
            return Err(RetrievalError::DuplicateId { id: entry.id, line: line_no });
        }
        entries.push(entry);
    }
    Ok(entries)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IndexBackend {
    Exact,
    Approximate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexHandle {
    pub dim: usize,
    pub count: usize,
    pub metric: &'static str,
    pub backend: IndexBackend,
}

/// Immutable dense index over corpus entries.
#[derive(Debug)]
pub struct VectorIndex {
    dim: usize,
    backend: IndexBackend,
    entries: Vec<CorpusEntry>,
    vectors: Vec<Vec<f64>>,
    graph: Option<HnswGraph>,
    searches: AtomicU64,
}

impl PartialEq for VectorIndex {
    fn eq(&self, other: &Self) -> bool {
        self.dim == other.dim
            && self.backend == other.backend
            && self.entries == other.entries
            && self.vectors == other.vectors
            && self.graph == other.graph
    }
}

fn check_unit(values: &[f64]) -> Result<(), RetrievalError> {
    let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
    if (norm - 1.0).abs() > UNIT_TOLERANCE {
        return Err(RetrievalError::NotUnit { norm });
    }
    Ok(())
}

impl VectorIndex {
    /// Builds an index from pre-computed unit vectors.
    pub fn from_vectors(
        entries: Vec<CorpusEntry>,
        vectors: Vec<EmbeddingVector>,
        backend: IndexBackend,
        params: HnswParams,
    ) -> Result<Self, RetrievalError> {
        let Some(first) = vectors.first() else {
            return Err(RetrievalError::EmptyCorpus);
        };
        let dim = first.dim();
        if entries.len() != vectors.len() {
            return Err(RetrievalError::DimensionMismatch { expected: entries.len(), got: vectors.len() });
        }
        let mut raw = Vec::with_capacity(vectors.len());
        for v in vectors {
            if v.is_null() {
                return Err(RetrievalError::NullQuery);
            }
            if v.dim() != dim {
                return Err(RetrievalError::DimensionMismatch { expected: dim, got: v.dim() });
            }
            check_unit(v.values())?;
            raw.push(v.into_values());
        }
        let graph = match backend {
            IndexBackend::Exact => None,
            IndexBackend::Approximate => Some(HnswGraph::build(&raw, params)),
        };
        Ok(VectorIndex { dim, backend, entries, vectors: raw, graph, searches: AtomicU64::new(0) })
    }

    pub(crate) fn from_parts(
        dim: usize,
        backend: IndexBackend,
        entries: Vec<CorpusEntry>,
        vectors: Vec<Vec<f64>>,
        graph: Option<HnswGraph>,
    ) -> Self {
        VectorIndex { dim, backend, entries, vectors, graph, searches: AtomicU64::new(0) }
    }

    pub fn handle(&self) -> IndexHandle {
        IndexHandle { dim: self.dim, count: self.entries.len(), metric: "cosine", backend: self.backend }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn backend(&self) -> IndexBackend {
        self.backend
    }

    pub fn entries(&self) -> &[CorpusEntry] {
        &self.entries
    }

    pub fn entry(&self, id: &str) -> Option<&CorpusEntry> {
        self.entries.iter().find(|e| e.id == id)
    }

    pub fn vector(&self, id: &str) -> Option<EmbeddingVector> {
        let i = self.entries.iter().position(|e| e.id == id)?;
        EmbeddingVector::new(self.vectors[i].clone()).ok()
    }

    pub(crate) fn vectors(&self) -> &[Vec<f64>] {
        &self.vectors
    }

    pub(crate) fn graph(&self) -> Option<&HnswGraph> {
        self.graph.as_ref()
    }

    /// Number of searches served since construction or load.
    pub fn search_count(&self) -> u64 {
        self.searches.load(Ordering::Relaxed)
    }

    fn check_query(&self, query: &EmbeddingVector) -> Result<(), RetrievalError> {
        if query.is_null() {
            return Err(RetrievalError::NullQuery);
        }
        if query.dim() != self.dim {
            return Err(RetrievalError::DimensionMismatch { expected: self.dim, got: query.dim() });
        }
        check_unit(query.values())
    }

    fn passage(&self, i: usize, score: f64, rank: usize) -> EvidencePassage {
        let e = &self.entries[i];
        EvidencePassage {
            entry_id: e.id.clone(),
            score,
            rank,
            category: e.category,
            title: e.title.clone(),
            text_snippet: truncate_chars(&e.text, SNIPPET_CHARS).to_string(),
            source: e.source.clone(),
        }
    }

    fn rank(&self, mut hits: Vec<(usize, f64)>, k: usize) -> Vec<EvidencePassage> {
        hits.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| self.entries[a.0].id.cmp(&self.entries[b.0].id)));
        hits.truncate(k);
        hits.into_iter().enumerate().map(|(r, (i, s))| self.passage(i, s, r + 1)).collect()
    }

    fn admits(&self, i: usize, filter: Option<&[CorpusCategory]>) -> bool {
        filter.is_none_or(|f| f.contains(&self.entries[i].category))
    }
}

/// Embeds every entry with `embedder` and indexes the vectors.
pub fn build_index(
    entries: Vec<CorpusEntry>,
    embedder: &dyn Embedder,
    backend: IndexBackend,
    params: HnswParams,
) -> Result<VectorIndex, RetrievalError> {
    if entries.is_empty() {
        return Err(RetrievalError::EmptyCorpus);
    }
    let mut vectors = Vec::with_capacity(entries.len());
    for e in &entries {
        let v = embedder
            .embed(&e.embedding_text())
            .map_err(|source| RetrievalError::Embed { entry_id: e.id.clone(), source })?;
        vectors.push(v);
    }
    VectorIndex::from_vectors(entries, vectors, backend, params)
}

/// Exhaustive cosine scoring over all entries admitted by `filter`.
pub fn search_exact(
    index: &VectorIndex,
    query: &EmbeddingVector,
    k: usize,
    filter: Option<&[CorpusCategory]>,
) -> Result<Vec<EvidencePassage>, RetrievalError> {
    index.check_query(query)?;
    index.searches.fetch_add(1, Ordering::Relaxed);
    if k == 0 {
        return Ok(Vec::new());
    }
    let hits = (0..index.len())
        .filter(|&i| index.admits(i, filter))
        .map(|i| (i, dot(query.values(), &index.vectors[i])))
        .collect();
    Ok(index.rank(hits, k))
}

/// Top-k search through the index's backend.
pub fn search_topk(
    index: &VectorIndex,
    query: &EmbeddingVector,
    k: usize,
    filter: Option<&[CorpusCategory]>,
) -> Result<Vec<EvidencePassage>, RetrievalError> {
    let graph = match (&index.graph, index.backend) {
        (Some(g), IndexBackend::Approximate) => g,
        _ => return search_exact(index, query, k, filter),
    };
    index.check_query(query)?;
    if k == 0 {
        index.searches.fetch_add(1, Ordering::Relaxed);
        return Ok(Vec::new());
    }
    let ef = graph.params.ef_search.max(k);
    let hits: Vec<(usize, f64)> = graph
        .search(&index.vectors, query.values(), ef)
        .into_iter()
        .map(|(n, s)| (n as usize, s))
        .filter(|&(i, _)| index.admits(i, filter))
        .collect();
    let admissible = (0..index.len()).filter(|&i| index.admits(i, filter)).count();
    if hits.len() < k.min(admissible) {
        // sparse filter: the graph neighbourhood did not hold enough admissible entries
        return search_exact(index, query, k, filter);
    }
    index.searches.fetch_add(1, Ordering::Relaxed);
    Ok(index.rank(hits, k))
}
