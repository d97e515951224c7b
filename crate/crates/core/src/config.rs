//! Pipeline configuration.
//!
//! Precedence, lowest to highest: built-in defaults, environment variables,
//! the TOML config file, explicit CLI flags or request parameters. A value set
//! in the file therefore wins over the environment.
//!
//! | variable | effect |
//! |---|---|
//! | `PROGNOSIS_BACKEND_MODE` | `mock` or `remote` |
//! | `PROGNOSIS_LLM_ENDPOINT` / `_API_KEY` / `_MODEL` | remote generation endpoint |
//! | `PROGNOSIS_EMBED_ENDPOINT` / `_API_KEY` | remote embedding endpoint |

use std::collections::HashMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::{EmbedderConfig, EmbeddingProvider, RemoteEndpoint};
use crate::eval::AblationVariant;
use crate::extraction::MIN_CHUNK_CHARS;
use crate::generation::{RemoteChatConfig, RetryPolicy};
use crate::retrieval::{CorpusCategory, HnswParams, IndexBackend, DEFAULT_K};

pub const ENV_BACKEND_MODE: &str = "PROGNOSIS_BACKEND_MODE";
pub const ENV_LLM_ENDPOINT: &str = "PROGNOSIS_LLM_ENDPOINT";
pub const ENV_LLM_API_KEY: &str = "PROGNOSIS_LLM_API_KEY";
pub const ENV_LLM_MODEL: &str = "PROGNOSIS_LLM_MODEL";
pub const ENV_EMBED_ENDPOINT: &str = "PROGNOSIS_EMBED_ENDPOINT";
pub const ENV_EMBED_API_KEY: &str = "PROGNOSIS_EMBED_API_KEY";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("invalid config {path}: {message}")]
    Parse { path: String, message: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendMode {
    #[default]
    Mock,
    Remote,
}

impl fmt::Display for BackendMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BackendMode::Mock => "mock",
            BackendMode::Remote => "remote",
        })
    }
}

impl FromStr for BackendMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "mock" => Ok(BackendMode::Mock),
            "remote" => Ok(BackendMode::Remote),
            other => Err(format!("unknown backend mode \"{other}\" (expected mock or remote)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrievalSettings {
    pub k: usize,
    pub backend: IndexBackend,
    pub hnsw: HnswParams,
    /// Restrict every search to these categories.
    pub filter: Option<Vec<CorpusCategory>>,
    /// One query per indicator category instead of one from the full summary.
    pub per_category_queries: bool,
}

impl Default for RetrievalSettings {
    fn default() -> Self {
        RetrievalSettings {
            k: DEFAULT_K,
            backend: IndexBackend::Exact,
            hnsw: HnswParams::default(),
            filter: None,
            per_category_queries: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerationSettings {
    pub mode: BackendMode,
    pub remote: Option<RemoteChatConfig>,
    pub retry: RetryPolicy,
    /// Mock rule table override.
    pub mock_rules: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathSettings {
    /// JSONL corpus; the built-in corpus is used when unset.
    pub corpus: Option<PathBuf>,
    /// Saved index; built from the corpus in memory when unset.
    pub index: Option<PathBuf>,
    /// Case store directory; cases are not persisted when unset.
    pub case_store: Option<PathBuf>,
    pub prompt_template: Option<PathBuf>,
    pub extraction_rules: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub embedding: EmbedderConfig,
    pub retrieval: RetrievalSettings,
    pub generation: GenerationSettings,
    pub variant: AblationVariant,
    pub max_chunk_chars: usize,
    /// Concurrent case predictions during evaluation.
    pub max_in_flight: usize,
    pub paths: PathSettings,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            embedding: EmbedderConfig::default(),
            retrieval: RetrievalSettings::default(),
            generation: GenerationSettings::default(),
            variant: AblationVariant::Full,
            max_chunk_chars: 1200,
            max_in_flight: 4,
            paths: PathSettings::default(),
        }
    }
}

impl PipelineConfig {
    /// Defaults overlaid with the process environment.
    pub fn from_env() -> Result<Self, ConfigError> {
        let vars: HashMap<String, String> = std::env::vars().collect();
        Self::from_vars(&vars)
    }

    pub fn from_vars(vars: &HashMap<String, String>) -> Result<Self, ConfigError> {
        let mut config = PipelineConfig::default();
        config.apply_vars(vars)?;
        Ok(config)
    }

    /// Environment, then the file at `path` (if any) on top.
    pub fn load(path: Option<&Path>) -> Result<Self, ConfigError> {
        let vars: HashMap<String, String> = std::env::vars().collect();
        Self::load_with_vars(path, &vars)
    }

    pub fn load_with_vars(path: Option<&Path>, vars: &HashMap<String, String>) -> Result<Self, ConfigError> {
        let base = Self::from_vars(vars)?;
        let config = match path {
            None => base,
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
                let file: toml::Table = text.parse().map_err(|e: toml::de::Error| ConfigError::Parse {
                    path: path.display().to_string(),
                    message: e.message().to_string(),
                })?;
                let mut merged = toml::Table::try_from(&base).map_err(|e| ConfigError::Invalid(e.to_string()))?;
                overlay(&mut merged, file);
                toml::Value::Table(merged).try_into().map_err(|e: toml::de::Error| ConfigError::Parse {
                    path: path.display().to_string(),
                    message: e.message().to_string(),
                })?
            }
        };
        config.validate()?;
        Ok(config)
    }

    fn apply_vars(&mut self, vars: &HashMap<String, String>) -> Result<(), ConfigError> {
        let get = |k: &str| vars.get(k).map(|v| v.trim().to_string()).filter(|v| !v.is_empty());
        if let Some(mode) = get(ENV_BACKEND_MODE) {
            self.generation.mode = mode.parse().map_err(ConfigError::Invalid)?;
        }
        if let Some(url) = get(ENV_LLM_ENDPOINT) {
            self.generation.remote = Some(RemoteChatConfig {
                url,
                api_key: get(ENV_LLM_API_KEY),
                model: get(ENV_LLM_MODEL).unwrap_or_else(|| "default".into()),
                temperature: 0.0,
                timeout_secs: 60,
                max_in_flight: 2,
                supports_label_scoring: true,
            });
        }
        if let Some(url) = get(ENV_EMBED_ENDPOINT) {
            self.embedding.provider = EmbeddingProvider::Remote(RemoteEndpoint {
                url,
                api_key: get(ENV_EMBED_API_KEY),
                model: "default".into(),
                timeout_secs: 30,
                max_in_flight: 4,
            });
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.max_chunk_chars < MIN_CHUNK_CHARS {
            return Err(ConfigError::Invalid(format!(
                "max_chunk_chars must be at least {MIN_CHUNK_CHARS} (got {})",
                self.max_chunk_chars
            )));
        }
        if self.embedding.dim < 2 {
            return Err(ConfigError::Invalid("embedding dim must be at least 2".into()));
        }
        if self.max_in_flight == 0 {
            return Err(ConfigError::Invalid("max_in_flight must be at least 1".into()));
        }
        if self.generation.mode == BackendMode::Remote && self.generation.remote.is_none() {
            return Err(ConfigError::Invalid(format!(
                "remote backend mode needs an endpoint ([generation.remote] or {ENV_LLM_ENDPOINT})"
            )));
        }
        let p = &self.paths;
        for (name, path) in [
            ("corpus", &p.corpus),
            ("index", &p.index),
            ("prompt_template", &p.prompt_template),
            ("extraction_rules", &p.extraction_rules),
            ("mock_rules", &self.generation.mock_rules),
        ] {
            if let Some(path) = path {
                if !path.exists() {
                    return Err(ConfigError::Invalid(format!("{name} path {} does not exist", path.display())));
                }
            }
        }
        Ok(())
    }
}

fn overlay(base: &mut toml::Table, top: toml::Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(t)) => overlay(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vars(pairs: &[(&str, &str)]) -> HashMap<String, String> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn defaults() {
        let c = PipelineConfig::from_vars(&HashMap::new()).unwrap();
        assert_eq!(c.generation.mode, BackendMode::Mock);
        assert_eq!(c.retrieval.k, 5);
        assert_eq!(c.embedding.dim, 384);
        assert_eq!(c.variant, AblationVariant::Full);
    }

    #[test]
    fn file_overrides_environment() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, "[generation]\nmode = \"mock\"\n[retrieval]\nk = 3\n").unwrap();
        let env = vars(&[(ENV_BACKEND_MODE, "remote"), (ENV_LLM_ENDPOINT, "http://127.0.0.1:9/v1")]);
        let c = PipelineConfig::load_with_vars(Some(&path), &env).unwrap();
        assert_eq!(c.generation.mode, BackendMode::Mock);
        assert_eq!(c.retrieval.k, 3);
        assert_eq!(c.generation.remote.unwrap().url, "http://127.0.0.1:9/v1");
        assert_eq!(PipelineConfig::load_with_vars(None, &env).unwrap().generation.mode, BackendMode::Remote);
    }

    #[test]
    fn rejects_bad_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, "max_chunk_chars = 100\n").unwrap();
        assert!(PipelineConfig::load_with_vars(Some(&path), &HashMap::new()).is_err());
        std::fs::write(&path, "bogus = 1\n").unwrap();
        assert!(PipelineConfig::load_with_vars(Some(&path), &HashMap::new()).is_err());
        std::fs::write(&path, "[paths]\ncorpus = \"/nonexistent/corpus.jsonl\"\n").unwrap();
        assert!(PipelineConfig::load_with_vars(Some(&path), &HashMap::new()).is_err());
        assert!(PipelineConfig::from_vars(&vars(&[(ENV_BACKEND_MODE, "cloud")])).is_err());
        assert!(PipelineConfig::load_with_vars(None, &vars(&[(ENV_BACKEND_MODE, "remote")])).is_err());
    }
}
