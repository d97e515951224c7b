//! Batch command line. Every command is a thin wrapper over library calls.
//!
//! Exit codes: 0 success, 1 validation or domain error (including bad flags),
//! 2 I/O or backend failure. Machine-readable results go to stdout, human
//! messages to stderr.

use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Parser, Subcommand};

use crate::config::{BackendMode, ConfigError, PipelineConfig};
use crate::eval::{evaluate, generate_synthetic_cohort, load_cohort, write_cohort, AblationVariant, EvalError};
use crate::pipeline::{read_case, CaseStore, Engine, PipelineError, PredictOptions, Service};
use crate::retrieval::{build_index, ingest_corpus, save_index, IndexBackend, RetrievalError};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_IO: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "prognosis", version, about = "Retrieval-augmented osteomyelitis outcome prognosis")]
pub struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Maximum concurrent case predictions.
    #[arg(long = "max-inflight", global = true, value_name = "N")]
    pub max_inflight: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Validate a JSONL corpus and write it back normalized.
    Ingest {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Embed a corpus and save the index.
    Index {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        dim: Option<usize>,
        #[arg(long, value_parser = parse_backend)]
        backend: Option<IndexBackend>,
    },
    /// Predict one case bundle and print the result.
    Predict {
        #[arg(long = "case")]
        case_path: PathBuf,
        /// Saved index; the configured or built-in corpus is indexed in memory otherwise.
        #[arg(long)]
        index: Option<PathBuf>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long, value_parser = parse_variant)]
        variant: Option<AblationVariant>,
        #[arg(long, value_parser = parse_mode)]
        backend: Option<BackendMode>,
    },
    /// Run ablation variants over a cohort and print the report.
    Evaluate {
        #[arg(long)]
        cohort: PathBuf,
        #[arg(long, value_delimiter = ',', value_parser = parse_variant, default_value = "full,no-rag,no-petct")]
        variants: Vec<AblationVariant>,
        #[arg(long, value_parser = parse_mode)]
        backend: Option<BackendMode>,
        /// Also write the report here, with plot data alongside as `.tsv`.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Write a seeded synthetic cohort directory.
    CohortGen {
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Start the HTTP API.
    Serve {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        /// Case store directory (overrides the configured one).
        #[arg(long)]
        store: Option<PathBuf>,
    },
}

fn parse_variant(s: &str) -> Result<AblationVariant, String> {
    s.parse()
}

fn parse_mode(s: &str) -> Result<BackendMode, String> {
    s.parse()
}

fn parse_backend(s: &str) -> Result<IndexBackend, String> {
    match s {
        "exact" => Ok(IndexBackend::Exact),
        "approximate" => Ok(IndexBackend::Approximate),
        other => Err(format!("unknown index backend \"{other}\" (expected exact or approximate)")),
    }
}

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    fn validation(message: impl ToString) -> Self {
        CliError { code: EXIT_VALIDATION, message: message.to_string() }
    }

    fn io(message: impl ToString) -> Self {
        CliError { code: EXIT_IO, message: message.to_string() }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        match e {
            ConfigError::Io { .. } => CliError::io(e),
            _ => CliError::validation(e),
        }
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        if e.is_validation() {
            CliError::validation(e)
        } else {
            CliError::io(e)
        }
    }
}

impl From<RetrievalError> for CliError {
    fn from(e: RetrievalError) -> Self {
        match e {
            RetrievalError::Io { .. } | RetrievalError::Embed { .. } => CliError::io(e),
            _ => CliError::validation(e),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Io { .. } => CliError::io(e),
            EvalError::Pipeline { ref source, .. } if !source.is_validation() => CliError::io(e),
            _ => CliError::validation(e),
        }
    }
}

fn require_file(path: &Path, what: &str) -> Result<(), CliError> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::io(format!("{what} {}: no such file or directory", path.display())))
    }
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| CliError::io(format!("{}: {e}", parent.display())))?;
    }
    std::fs::write(path, contents).map_err(|e| CliError::io(format!("{}: {e}", path.display())))
}

fn to_json<T: serde::Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("output serializes")
}

/// Parses `argv` (including the program name) and runs the command.
pub fn run_cli<I, S>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = write!(err, "{}", e.render());
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_VALIDATION,
            };
        }
    };
    match execute(cli, out, err) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "error: {}", e.message);
            e.code
        }
    }
}

fn load_config(cli: &Cli) -> Result<PipelineConfig, CliError> {
    if let Some(p) = &cli.config {
        require_file(p, "config")?;
    }
    let mut config = PipelineConfig::load(cli.config.as_deref())?;
    if let Some(n) = cli.max_inflight {
        if n == 0 {
            return Err(CliError::validation("--max-inflight must be at least 1"));
        }
        config.max_in_flight = n;
    }
    Ok(config)
}

pub fn execute(cli: Cli, out: &mut dyn Write, err: &mut dyn Write) -> Result<(), CliError> {
    let mut config = load_config(&cli)?;
    let emit = |out: &mut dyn Write, text: &str| writeln!(out, "{text}").map_err(|e| CliError::io(format!("stdout: {e}")));
    match cli.command {
        Command::Ingest { corpus, out: dest } => {
            let entries = ingest_corpus(&corpus)?;
            let mut body = String::new();
            for e in &entries {
                body.push_str(&serde_json::to_string(e).expect("entry serializes"));
                body.push('\n');
            }
            write_file(&dest, &body)?;
            let _ = writeln!(err, "ingested {} entries into {}", entries.len(), dest.display());
            let mut counts = std::collections::BTreeMap::new();
            for e in &entries {
                *counts.entry(e.category.as_str()).or_insert(0usize) += 1;
            }
            emit(out, &to_json(&serde_json::json!({ "entries": entries.len(), "categories": counts })))
        }
        Command::Index { corpus, index, dim, backend } => {
            if let Some(d) = dim {
                config.embedding.dim = d;
            }
            let backend = backend.unwrap_or(config.retrieval.backend);
            let entries = ingest_corpus(&corpus)?;
            let embedder = config.embedding.build().map_err(CliError::validation)?;
            let built = build_index(entries, embedder.as_ref(), backend, config.retrieval.hnsw)?;
            save_index(&built, &index)?;
            let _ = writeln!(err, "indexed {} entries into {}", built.len(), index.display());
            emit(out, &to_json(&built.handle()))
        }
        Command::Predict { case_path, index, k, variant, backend } => {
            require_file(&case_path, "case bundle")?;
            if let Some(i) = index {
                require_file(&i, "index")?;
                config.paths.index = Some(i);
            }
            if let Some(b) = backend {
                config.generation.mode = b;
            }
            let case = read_case(&case_path)?;
            let engine = Engine::from_config(config.clone())?;
            let opts = PredictOptions { variant: variant.unwrap_or(config.variant), k };
            let result = match &config.paths.case_store {
                Some(dir) => {
                    let svc = Service::new(Arc::new(engine), CaseStore::open(dir)?);
                    let id = svc.ingest_case(&case)?;
                    let _ = writeln!(err, "stored as {id}");
                    svc.predict(&id, opts)?
                }
                None => engine.predict(&case, opts)?,
            };
            let _ = writeln!(err, "{}: {}", result.patient_id, result.label);
            emit(out, &to_json(&result))
        }
        Command::Evaluate { cohort, variants, backend, report } => {
            require_file(&cohort, "cohort")?;
            if let Some(b) = backend {
                config.generation.mode = b;
            }
            if variants.is_empty() {
                return Err(CliError::validation("--variants must name at least one variant"));
            }
            let cohort = load_cohort(&cohort)?;
            let engine = Engine::from_config(config)?;
            let result = evaluate(&cohort, &variants, &engine)?;
            for v in &result.variants {
                let _ = writeln!(err, "{:<9} macro-F1 {:.4}  ({} cases, {} excluded)", v.variant.as_str(), v.macro_f1, v.confusion.total, v.excluded.len());
            }
            let json = result.to_json();
            if let Some(path) = report {
                write_file(&path, &json)?;
                write_file(&path.with_extension("tsv"), &result.plot_tsv())?;
            }
            out.write_all(json.as_bytes()).map_err(|e| CliError::io(format!("stdout: {e}")))
        }
        Command::CohortGen { seed, n, out: dest } => {
            let cohort = generate_synthetic_cohort(seed, n)?;
            write_cohort(&cohort, &dest)?;
            let _ = writeln!(err, "wrote {} cases to {}", cohort.len(), dest.display());
            let ids: Vec<&str> = cohort.cases.iter().map(|c| c.case_id.as_str()).collect();
            emit(out, &to_json(&ids))
        }
        Command::Serve { port, host, store } => {
            let dir = store.or_else(|| config.paths.case_store.clone()).unwrap_or_else(|| PathBuf::from("prognosis-store"));
            let addr: SocketAddr =
                format!("{host}:{port}").parse().map_err(|e| CliError::validation(format!("bad address: {e}")))?;
            let engine = Engine::from_config(config)?;
            let svc = Arc::new(Service::new(Arc::new(engine), CaseStore::open(&dir)?));
            let _ = writeln!(err, "serving on http://{addr} (store {})", dir.display());
            let rt = tokio::runtime::Builder::new_multi_thread()
                .enable_all()
                .build()
                .map_err(|e| CliError::io(format!("runtime: {e}")))?;
            rt.block_on(crate::server::serve(svc, addr)).map_err(|e| CliError::io(format!("server: {e}")))
        }
    }
}
