//! Passage and QA-sample storage, plus the answer normalization shared by
//! every scorer in the crate.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

/// One retrievable paragraph.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Passage {
    pub id: String,
    pub title: String,
    pub text: String,
}

/// A question with its gold supporting passages and gold answer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeSample {
    /// Sample identifier. JSONL inputs without an `id` get `sample-<line>`.
    #[serde(default)]
    pub id: String,
    pub question: String,
    #[serde(default)]
    pub gold_support: Vec<String>,
    pub answer: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum CorpusFormat {
    Jsonl,
    HotpotqaJson,
}

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse { path: PathBuf, line: usize, message: String },
    #[error("duplicate passage id `{0}`")]
    DuplicatePassage(String),
    #[error("duplicate sample id `{0}`")]
    DuplicateSample(String),
    #[error("sample `{sample}` references unknown passage `{passage}`")]
    UnknownSupport { sample: String, passage: String },
    #[error("invalid record at {path}:{line}: {message}")]
    Invalid { path: PathBuf, line: usize, message: String },
}

/// Immutable passage map plus the QA samples that reference it.
#[derive(Debug, Clone, Default)]
pub struct CorpusStore {
    passages: BTreeMap<String, Passage>,
    samples: Vec<EpisodeSample>,
}

impl CorpusStore {
    /// Builds a store from in-memory records, applying the same validation as
    /// file ingestion.
    pub fn from_parts(passages: Vec<Passage>, samples: Vec<EpisodeSample>) -> Result<Self, CorpusError> {
        let mut store = CorpusStore::default();
        for p in passages {
            store.insert_passage(p)?;
        }
        let mut seen = HashSet::new();
        for s in samples {
            if !seen.insert(s.id.clone()) {
                return Err(CorpusError::DuplicateSample(s.id));
            }
            store.samples.push(s);
        }
        store.check_support()?;
        Ok(store)
    }

    fn insert_passage(&mut self, p: Passage) -> Result<(), CorpusError> {
        if self.passages.contains_key(&p.id) {
            return Err(CorpusError::DuplicatePassage(p.id));
        }
        self.passages.insert(p.id.clone(), p);
        Ok(())
    }

    fn check_support(&self) -> Result<(), CorpusError> {
        for s in &self.samples {
            for id in &s.gold_support {
                if !self.passages.contains_key(id) {
                    return Err(CorpusError::UnknownSupport { sample: s.id.clone(), passage: id.clone() });
                }
            }
        }
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&Passage> {
        self.passages.get(id)
    }

    /// Passages in ascending id order.
    pub fn passages(&self) -> impl ExactSizeIterator<Item = &Passage> {
        self.passages.values()
    }

    pub fn samples(&self) -> &[EpisodeSample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.passages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.passages.is_empty()
    }

    /// Merges another store into this one. Passage ids must stay unique.
    pub fn merge(mut self, other: CorpusStore) -> Result<Self, CorpusError> {
        for (_, p) in other.passages {
            self.insert_passage(p)?;
        }
        let mut seen: HashSet<String> = self.samples.iter().map(|s| s.id.clone()).collect();
        for s in other.samples {
            if !seen.insert(s.id.clone()) {
                return Err(CorpusError::DuplicateSample(s.id));
            }
            self.samples.push(s);
        }
        self.check_support()?;
        Ok(self)
    }
}

/// A JSONL line is either a passage or a sample; samples carry `question`.
#[derive(Deserialize)]
#[serde(untagged)]
enum JsonlRecord {
    Sample(EpisodeSample),
    Passage(Passage),
}

pub fn ingest_corpus(path: &Path, format: CorpusFormat) -> Result<CorpusStore, CorpusError> {
    let raw = fs::read_to_string(path).map_err(|source| CorpusError::Io { path: path.to_path_buf(), source })?;
    match format {
        CorpusFormat::Jsonl => parse_jsonl(path, &raw),
        CorpusFormat::HotpotqaJson => parse_hotpotqa(path, &raw),
    }
}

fn parse_jsonl(path: &Path, raw: &str) -> Result<CorpusStore, CorpusError> {
    let mut store = CorpusStore::default();
    let mut seen_samples = HashSet::new();
    for (idx, line) in raw.lines().enumerate() {
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let record: JsonlRecord = serde_json::from_str(line).map_err(|e| CorpusError::Parse {
            path: path.to_path_buf(),
            line: lineno,
            message: e.to_string(),
        })?;
        let invalid = |message: &str| CorpusError::Invalid {
            path: path.to_path_buf(),
            line: lineno,
            message: message.to_string(),
        };
        match record {
            JsonlRecord::Passage(p) => {
                if p.id.is_empty() {
                    return Err(invalid("passage id is empty"));
                }
                if p.text.trim().is_empty() {
                    return Err(invalid("passage text is empty"));
                }
                store.insert_passage(p)?;
            }
            JsonlRecord::Sample(mut s) => {
                if s.id.is_empty() {
                    s.id = format!("sample-{lineno}");
                }
                if s.answer.trim().is_empty() {
                    return Err(invalid("sample answer is empty"));
                }
                if !seen_samples.insert(s.id.clone()) {
                    return Err(CorpusError::DuplicateSample(s.id));
                }
                store.samples.push(s);
            }
        }
    }
    store.check_support()?;
    Ok(store)
}

#[derive(Deserialize)]
struct HotpotRecord {
    #[serde(rename = "_id")]
    id: String,
    question: String,
    answer: String,
    supporting_facts: Vec<(String, serde_json::Value)>,
    context: Vec<(String, Vec<String>)>,
}

/// Reads the HotPotQA distribution format. Paragraphs are keyed by title; a
/// title that recurs across questions must carry identical text.
fn parse_hotpotqa(path: &Path, raw: &str) -> Result<CorpusStore, CorpusError> {
    let records: Vec<HotpotRecord> = serde_json::from_str(raw).map_err(|e| CorpusError::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        message: e.to_string(),
    })?;
    let mut store = CorpusStore::default();
    let mut seen_samples = HashSet::new();
    for rec in records {
        for (title, sentences) in &rec.context {
            let text = sentences.concat().trim().to_string();
            if text.is_empty() {
                continue;
            }
            match store.passages.get(title) {
                Some(existing) if existing.text == text => {}
                Some(_) => return Err(CorpusError::DuplicatePassage(title.clone())),
                None => {
                    store.insert_passage(Passage { id: title.clone(), title: title.clone(), text })?;
                }
            }
        }
        let mut gold = Vec::new();
        for (title, _) in &rec.supporting_facts {
            if !gold.contains(title) {
                gold.push(title.clone());
            }
        }
        if !seen_samples.insert(rec.id.clone()) {
            return Err(CorpusError::DuplicateSample(rec.id));
        }
        store.samples.push(EpisodeSample {
            id: rec.id,
            question: rec.question,
            gold_support: gold,
            answer: rec.answer,
        });
    }
    store.check_support()?;
    Ok(store)
}

/// Writes passages then samples as JSONL.
pub fn write_jsonl(store: &CorpusStore, path: &Path) -> std::io::Result<()> {
    use std::io::Write;
    let mut out = std::io::BufWriter::new(fs::File::create(path)?);
    for p in store.passages() {
        serde_json::to_writer(&mut out, p)?;
        out.write_all(b"\n")?;
    }
    for s in store.samples() {
        serde_json::to_writer(&mut out, s)?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

static PUNCT: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\p{P}").unwrap());
static ARTICLES: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\b(a|an|the)\b").unwrap());

/// SQuAD/HotPotQA answer normalization: lowercase, drop punctuation, drop
/// the articles a/an/the, collapse whitespace.
pub fn normalize_answer(s: &str) -> String {
    let lower = s.to_lowercase();
    let no_punct = PUNCT.replace_all(&lower, "");
    let no_articles = ARTICLES.replace_all(&no_punct, " ");
    no_articles.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Whitespace tokens of the normalized string.
pub fn normalized_tokens(s: &str) -> Vec<String> {
    normalize_answer(s).split(' ').filter(|t| !t.is_empty()).map(str::to_string).collect()
}
