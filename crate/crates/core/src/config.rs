//! Declarative application config (TOML), validation, presets and fingerprints.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{ingest_corpus, CorpusFormat, CorpusStore};
use crate::embed::{EmbeddingProvider, ProviderConfig};
use crate::episode::{EpisodeConfig, Mode, RefinerQuery, StopPolicy};
use crate::index::{IndexVariant, VectorIndex};
use crate::llm::EndpointConfig;
use crate::reasoner::{
    Answerer, Backends, LlmReasoner, PolicyParams, QuestionAsQuery, Questioner, ScriptedReasoner,
    ShortestTitleAnswerer, TemplatePolicy,
};
use crate::refine::{Refiner, RefinerStrategy, DEFAULT_FAN_OUT, DEFAULT_TOP_K};
use crate::reward::TrainerConfig;
use crate::synth::TwoHopSpec;
use crate::tracker::TrackerParams;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: `{field}`: {message}")]
    Parse { path: PathBuf, field: String, message: String },
    #[error("`{field}`: {message}")]
    Invalid { field: String, message: String },
}

fn invalid(field: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid { field: field.into(), message: message.into() }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSection {
    pub paths: Vec<PathBuf>,
    pub format: CorpusFormat,
}

impl Default for CorpusSection {
    fn default() -> Self {
        Self { paths: Vec::new(), format: CorpusFormat::Jsonl }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct IndexSection {
    pub variant: IndexVariant,
    /// Saved index to load; built in memory when absent.
    pub path: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RefinerSection {
    pub strategy: RefinerStrategy,
    pub top_k: usize,
    pub fan_out: usize,
    pub query: RefinerQuery,
}

impl Default for RefinerSection {
    fn default() -> Self {
        Self {
            strategy: RefinerStrategy::Lexical,
            top_k: DEFAULT_TOP_K,
            fan_out: DEFAULT_FAN_OUT,
            query: RefinerQuery::Turn,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EpisodeSection {
    pub mode: Mode,
    pub stop_policy: StopPolicy,
}

impl Default for EpisodeSection {
    fn default() -> Self {
        Self { mode: Mode::Infer, stop_policy: StopPolicy::FixedTurns }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum QuestionerConfig {
    Scripted {
        path: PathBuf,
    },
    QuestionAsQuery,
    TemplatePolicy {
        /// Policy JSON; a uniform policy over all templates when absent.
        #[serde(default)]
        path: Option<PathBuf>,
        #[serde(default)]
        greedy: bool,
    },
    Llm {
        endpoint: EndpointConfig,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum AnswererConfig {
    Scripted { path: PathBuf },
    ShortestTitle,
    Llm { endpoint: EndpointConfig },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackendSection {
    pub questioner: QuestionerConfig,
    pub answerer: AnswererConfig,
}

impl Default for BackendSection {
    fn default() -> Self {
        Self { questioner: QuestionerConfig::QuestionAsQuery, answerer: AnswererConfig::ShortestTitle }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AppConfig {
    pub seed: u64,
    pub parallelism: usize,
    pub output_dir: PathBuf,
    pub corpus: CorpusSection,
    pub embedding: ProviderConfig,
    pub index: IndexSection,
    pub refiner: RefinerSection,
    pub tracker: TrackerParams,
    pub episode: EpisodeSection,
    pub backends: BackendSection,
    pub trainer: TrainerConfig,
    /// Synthetic task used by `train-toy`.
    pub toy: TwoHopSpec,
}

impl Default for AppConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            parallelism: 1,
            output_dir: PathBuf::from("runs/default"),
            corpus: CorpusSection::default(),
            embedding: ProviderConfig::default(),
            index: IndexSection::default(),
            refiner: RefinerSection::default(),
            tracker: TrackerParams::default(),
            episode: EpisodeSection::default(),
            backends: BackendSection::default(),
            trainer: TrainerConfig::default(),
            toy: TwoHopSpec::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum AblationPreset {
    /// Identity refiner passing the top five retrieved passages through.
    NoRefiner,
    /// One retrieval with the question as the only query.
    NoIm,
}

impl AppConfig {
    pub fn from_toml_str(text: &str, origin: &Path) -> Result<Self, ConfigError> {
        let de = toml::Deserializer::parse(text).map_err(|e| ConfigError::Parse {
            path: origin.into(),
            field: String::new(),
            message: e.to_string(),
        })?;
        let cfg: AppConfig = serde_path_to_error::deserialize(de).map_err(|e| ConfigError::Parse {
            path: origin.into(),
            field: e.path().to_string(),
            message: e.inner().message().to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads a config file; relative paths inside it resolve against its directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.into(), source })?;
        let mut cfg = Self::from_toml_str(&text, path)?;
        let parent = match path.parent() {
            Some(p) if !p.as_os_str().is_empty() => p,
            _ => Path::new("."),
        };
        let base = std::fs::canonicalize(parent).unwrap_or_else(|_| parent.to_path_buf());
        cfg.resolve_paths(&base);
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        self.corpus.paths.iter_mut().for_each(fix);
        fix(&mut self.output_dir);
        if let Some(p) = self.index.path.as_mut() {
            fix(p);
        }
        match &mut self.backends.questioner {
            QuestionerConfig::Scripted { path } => fix(path),
            QuestionerConfig::TemplatePolicy { path: Some(path), .. } => fix(path),
            _ => {}
        }
        if let AnswererConfig::Scripted { path } = &mut self.backends.answerer {
            fix(path);
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let t = &self.tracker;
        if !(t.gamma > 0.0 && t.gamma < 1.0) {
            return Err(invalid("tracker.gamma", "must lie in (0, 1)"));
        }
        if !t.phi_r.is_finite() {
            return Err(invalid("tracker.phi_r", "must be finite"));
        }
        if t.n_max == 0 {
            return Err(invalid("tracker.n_max", "must be at least 1"));
        }
        if self.refiner.top_k == 0 {
            return Err(invalid("refiner.top_k", "must be at least 1"));
        }
        if self.refiner.fan_out == 0 {
            return Err(invalid("refiner.fan_out", "must be at least 1"));
        }
        if self.parallelism == 0 {
            return Err(invalid("parallelism", "must be at least 1"));
        }
        match &self.embedding {
            ProviderConfig::HashLocal { dim, .. } | ProviderConfig::HttpRemote { dim, .. } if *dim == 0 => {
                return Err(invalid("embedding.dim", "must be positive"));
            }
            _ => {}
        }
        if let IndexVariant::Ivf { num_clusters, num_probes, .. } = self.index.variant {
            if num_clusters == 0 || num_probes == 0 {
                return Err(invalid("index.variant", "clusters and probes must be positive"));
            }
        }
        self.trainer.validate().map_err(|e| invalid("trainer", e.to_string()))?;
        Ok(())
    }

    pub fn apply_preset(&mut self, preset: AblationPreset) {
        match preset {
            AblationPreset::NoRefiner => {
                self.refiner.strategy = RefinerStrategy::Identity;
                self.refiner.top_k = DEFAULT_TOP_K;
            }
            AblationPreset::NoIm => {
                self.backends.questioner = QuestionerConfig::QuestionAsQuery;
                self.tracker.n_max = 1;
                self.episode.stop_policy = StopPolicy::FixedTurns;
            }
        }
    }

    /// SHA-256 over the resolved config, seed included. Output location and
    /// thread count do not change results and are left out.
    pub fn fingerprint(&self) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        c.parallelism = 1;
        let canonical = serde_json::to_vec(&c).expect("config serializes");
        hex::encode(Sha256::digest(&canonical))
    }

    pub fn episode_config(&self) -> EpisodeConfig {
        EpisodeConfig {
            mode: self.episode.mode,
            fan_out: self.refiner.fan_out,
            tracker: self.tracker,
            stop_policy: self.episode.stop_policy,
            refiner_query: self.refiner.query,
            alpha: self.trainer.alpha,
            seed: self.seed,
        }
    }

    pub fn refiner(&self) -> Refiner {
        Refiner::new(self.refiner.strategy.clone(), self.refiner.top_k)
    }

    pub fn provider(&self) -> Arc<dyn EmbeddingProvider> {
        self.embedding.build()
    }

    pub fn load_corpus(&self) -> anyhow::Result<CorpusStore> {
        let mut paths = self.corpus.paths.iter();
        let first = paths.next().ok_or_else(|| invalid("corpus.paths", "no corpus files configured"))?;
        let mut store = ingest_corpus(first, self.corpus.format)?;
        for p in paths {
            store = store.merge(ingest_corpus(p, self.corpus.format)?)?;
        }
        Ok(store)
    }

    /// Loads the saved index when configured and present, else builds one.
    pub fn load_or_build_index(
        &self,
        store: &CorpusStore,
        provider: &dyn EmbeddingProvider,
    ) -> anyhow::Result<VectorIndex> {
        if let Some(path) = &self.index.path {
            if path.exists() {
                let index = VectorIndex::load(path)?;
                if index.len() != store.len() || index.dim() != provider.dim() {
                    anyhow::bail!("index {} does not match the configured corpus or embedding", path.display());
                }
                return Ok(index);
            }
        }
        Ok(VectorIndex::build(store, provider, self.index.variant)?)
    }

    pub fn backends(&self) -> anyhow::Result<Backends> {
        let questioner: Arc<dyn Questioner> = match &self.backends.questioner {
            QuestionerConfig::Scripted { path } => Arc::new(ScriptedReasoner::load_jsonl(path)?),
            QuestionerConfig::QuestionAsQuery => Arc::new(QuestionAsQuery),
            QuestionerConfig::TemplatePolicy { path, greedy } => {
                let params = match path {
                    Some(p) => PolicyParams::load(p)?,
                    None => PolicyParams::uniform(self.tracker.n_max, crate::reasoner::QueryTemplate::ALL.to_vec()),
                };
                let policy = TemplatePolicy::new(params)?;
                Arc::new(if *greedy { policy.greedy() } else { policy })
            }
            QuestionerConfig::Llm { endpoint } => Arc::new(LlmReasoner::from_endpoint(endpoint)),
        };
        let answerer: Arc<dyn Answerer> = match &self.backends.answerer {
            AnswererConfig::Scripted { path } => Arc::new(ScriptedReasoner::load_jsonl(path)?),
            AnswererConfig::ShortestTitle => Arc::new(ShortestTitleAnswerer),
            AnswererConfig::Llm { endpoint } => Arc::new(LlmReasoner::from_endpoint(endpoint)),
        };
        Ok(Backends { questioner, answerer })
    }
}
