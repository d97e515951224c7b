//! Pattern-table extractor. Tables ship as a versioned JSON asset and can be
//! replaced from a file; every key has an ordered pattern list and the first
//! successful pattern in a chunk wins for that chunk.

use std::collections::HashMap;
use std::path::Path;

use regex::Regex;
use serde::Deserialize;

use super::{Candidate, ExtractionError, ExtractorBackend, ExtractorCapabilities};
use crate::model::{ClinicalDocument, DocumentChunk, ExtractionMethod, IndicatorKey, Value};

pub const DEFAULT_RULES: &str = include_str!("../../assets/extraction_rules.v1.json");
pub const WBC_UNIT: &str = "×10⁹/L";
/// Bare WBC values above this are read as cells per microlitre.
const WBC_PER_UL_THRESHOLD: f64 = 200.0;

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RuleFile {
    version: String,
    #[serde(default)]
    number_words: HashMap<String, i64>,
    rules: Vec<RuleSpec>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TableEntry<T> {
    pattern: String,
    value: T,
}

#[derive(Deserialize)]
struct RuleSpec {
    key: IndicatorKey,
    #[serde(flatten)]
    kind: KindSpec,
}

#[derive(Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum KindSpec {
    Keyword { table: Vec<TableEntry<String>> },
    Flag { table: Vec<TableEntry<bool>> },
    Count { patterns: Vec<String> },
    Interval { patterns: Vec<String> },
    Wbc { patterns: Vec<String> },
    PrePost { patterns: Vec<String>, #[serde(default)] unit: String },
    CiernyMader { patterns: Vec<String> },
}

#[derive(Debug)]
enum Matcher {
    Keyword(Vec<(Regex, String)>),
    Flag(Vec<(Regex, bool)>),
    Count(Vec<Regex>),
    Interval(Vec<Regex>),
    Wbc(Vec<Regex>),
    PrePost(Vec<Regex>, String),
    CiernyMader(Vec<Regex>),
}

/// Compiled rule table.
#[derive(Debug)]
pub struct RuleSet {
    version: String,
    number_words: HashMap<String, i64>,
    rules: Vec<(IndicatorKey, Matcher)>,
}

fn compile(key: IndicatorKey, pattern: &str) -> Result<Regex, ExtractionError> {
    Regex::new(pattern).map_err(|e| ExtractionError::Rules(format!("{key}: {e}")))
}

fn compile_all(key: IndicatorKey, patterns: &[String]) -> Result<Vec<Regex>, ExtractionError> {
    patterns.iter().map(|p| compile(key, p)).collect()
}

fn require_group(key: IndicatorKey, re: &Regex, group: &str) -> Result<(), ExtractionError> {
    if re.capture_names().flatten().any(|n| n == group) {
        Ok(())
    } else {
        Err(ExtractionError::Rules(format!("{key}: pattern lacks named group \"{group}\"")))
    }
}

impl RuleSet {
    pub fn from_json(text: &str) -> Result<Self, ExtractionError> {
        let file: RuleFile = serde_json::from_str(text).map_err(|e| ExtractionError::Rules(e.to_string()))?;
        let mut rules = Vec::with_capacity(file.rules.len());
        for spec in file.rules {
            let key = spec.key;
            let matcher = match spec.kind {
                KindSpec::Keyword { table } => Matcher::Keyword(
                    table.into_iter().map(|e| Ok((compile(key, &e.pattern)?, e.value))).collect::<Result<_, _>>()?,
                ),
                KindSpec::Flag { table } => Matcher::Flag(
                    table.into_iter().map(|e| Ok((compile(key, &e.pattern)?, e.value))).collect::<Result<_, _>>()?,
                ),
                KindSpec::Count { patterns } => {
                    let res = compile_all(key, &patterns)?;
                    res.iter().try_for_each(|r| require_group(key, r, "n"))?;
                    Matcher::Count(res)
                }
                KindSpec::Interval { patterns } => {
                    let res = compile_all(key, &patterns)?;
                    res.iter().try_for_each(|r| {
                        require_group(key, r, "n")?;
                        require_group(key, r, "unit")
                    })?;
                    Matcher::Interval(res)
                }
                KindSpec::Wbc { patterns } => {
                    let res = compile_all(key, &patterns)?;
                    res.iter().try_for_each(|r| require_group(key, r, "value"))?;
                    Matcher::Wbc(res)
                }
                KindSpec::PrePost { patterns, unit } => {
                    let res = compile_all(key, &patterns)?;
                    res.iter().try_for_each(|r| {
                        require_group(key, r, "pre")?;
                        require_group(key, r, "post")
                    })?;
                    Matcher::PrePost(res, unit)
                }
                KindSpec::CiernyMader { patterns } => {
                    let res = compile_all(key, &patterns)?;
                    res.iter().try_for_each(|r| require_group(key, r, "type"))?;
                    Matcher::CiernyMader(res)
                }
            };
            rules.push((key, matcher));
        }
        let number_words = file.number_words.into_iter().map(|(k, v)| (k.to_lowercase(), v)).collect();
        Ok(RuleSet { version: file.version, number_words, rules })
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self, ExtractionError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| ExtractionError::Rules(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn version(&self) -> &str {
        &self.version
    }

    fn number(&self, token: &str) -> Option<i64> {
        token.parse().ok().or_else(|| self.number_words.get(&token.to_lowercase()).copied())
    }

    fn match_one(&self, matcher: &Matcher, text: &str) -> Option<Value> {
        match matcher {
            Matcher::Keyword(table) => {
                table.iter().find(|(re, _)| re.is_match(text)).map(|(_, v)| Value::Text { text: v.clone() })
            }
            Matcher::Flag(table) => {
                table.iter().find(|(re, _)| re.is_match(text)).map(|(_, v)| Value::Boolean { value: *v })
            }
            Matcher::Count(res) => res.iter().find_map(|re| {
                re.captures_iter(text).find_map(|c| self.number(&c["n"])).map(|count| Value::Count { count })
            }),
            Matcher::Interval(res) => res.iter().find_map(|re| {
                re.captures_iter(text).find_map(|c| {
                    let n: i64 = c["n"].parse().ok()?;
                    let unit = c["unit"].to_lowercase();
                    let factor = if unit.starts_with("week") {
                        7
                    } else if unit.starts_with("month") {
                        30
                    } else {
                        1
                    };
                    Some(Value::Interval { days: n.checked_mul(factor)? })
                })
            }),
            Matcher::Wbc(res) => res.iter().find_map(|re| {
                re.captures_iter(text).find_map(|c| {
                    let raw = c["value"].replace(',', "");
                    let mut value: f64 = raw.parse().ok()?;
                    let per_ul = match c.name("unit") {
                        Some(u) => {
                            let u = u.as_str().to_lowercase();
                            u.contains('µ') || u.contains('μ') || u.contains("ul") || u.contains("mm")
                        }
                        None => value > WBC_PER_UL_THRESHOLD,
                    };
                    if per_ul {
                        value /= 1000.0;
                    }
                    value.is_finite().then(|| Value::Number { value, unit: WBC_UNIT.to_string() })
                })
            }),
            Matcher::PrePost(res, unit) => res.iter().find_map(|re| {
                re.captures_iter(text).find_map(|c| {
                    let pre: f64 = c["pre"].parse().ok()?;
                    let post: f64 = c["post"].parse().ok()?;
                    Some(Value::PrePostPair { pre, post, unit: unit.clone() })
                })
            }),
            Matcher::CiernyMader(res) => res.iter().find_map(|re| {
                re.captures(text).map(|c| {
                    let ty = match &c["type"] {
                        "1" => "I",
                        "2" => "II",
                        "3" => "III",
                        "4" => "IV",
                        t => t,
                    }
                    .to_string();
                    let text = match c.name("host") {
                        Some(h) => format!("{ty}-{}", h.as_str().to_uppercase()),
                        None => ty,
                    };
                    Value::Text { text }
                })
            }),
        }
    }

    /// Every `(key, value)` found in `chunk`, at most one per key.
    pub fn match_chunk(&self, chunk: &DocumentChunk) -> Vec<(IndicatorKey, Value)> {
        self.rules
            .iter()
            .filter_map(|(key, matcher)| self.match_one(matcher, &chunk.text).map(|v| (*key, v)))
            .collect()
    }
}

impl Default for RuleSet {
    fn default() -> Self {
        RuleSet::from_json(DEFAULT_RULES).expect("shipped rule table compiles")
    }
}

/// Deterministic extractor backed by a [`RuleSet`]. Ignores image payloads.
#[derive(Debug, Default)]
pub struct RuleExtractor {
    rules: RuleSet,
}

impl RuleExtractor {
    pub fn new(rules: RuleSet) -> Self {
        RuleExtractor { rules }
    }

    pub fn rules(&self) -> &RuleSet {
        &self.rules
    }
}

impl ExtractorBackend for RuleExtractor {
    fn capabilities(&self) -> ExtractorCapabilities {
        ExtractorCapabilities {
            supports_image: false,
            deterministic: true,
            name: format!("rules-{}", self.rules.version),
            max_in_flight: usize::MAX,
        }
    }

    fn method(&self) -> ExtractionMethod {
        ExtractionMethod::RuleBased
    }

    fn extract_document(
        &self,
        _doc: &ClinicalDocument,
        chunks: &[DocumentChunk],
    ) -> Result<Vec<Candidate>, ExtractionError> {
        Ok(chunks
            .iter()
            .flat_map(|chunk| {
                self.rules
                    .match_chunk(chunk)
                    .into_iter()
                    .map(move |(key, value)| Candidate { key, value, chunk: chunk.reference() })
            })
            .collect())
    }
}
