//! The inner-monologue loop: questioner → retriever → refiner → tracker
//! until the switch rule hands over to the answerer, plus a batch runner.

use std::fs;
use std::io::{BufRead, Write};
use std::path::Path;
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{CorpusStore, EpisodeSample};
use crate::embed::EmbeddingProvider;
use crate::index::VectorIndex;
use crate::reasoner::{ActionInfo, Backends, ImTranscript, ImTurn, Proposal, ProposeContext, ReasonerError};
use crate::refine::{retrieve, RefinedSet, Refiner};
use crate::reward::{answer_f1, compose_reward, RewardBreakdown};
use crate::tracker::{switch_role, Role, RoleDecision, SwitchReason, TrackerParams, TrackerState};

pub const RESULT_SCHEMA_VERSION: u32 = 1;
const NO_QUERY_SENTINEL: &str = "[no query]";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Train,
    Infer,
}

/// How an inference episode decides to stop questioning.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum StopPolicy {
    /// Always run N_max turns.
    #[default]
    FixedTurns,
    /// Stop when the questioner declares it is ready, capped at N_max.
    ReasonerDeclared,
}

/// Which text the refiner ranks against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum RefinerQuery {
    #[default]
    Turn,
    Question,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeConfig {
    pub mode: Mode,
    pub fan_out: usize,
    pub tracker: TrackerParams,
    pub stop_policy: StopPolicy,
    pub refiner_query: RefinerQuery,
    /// KL weight reported in the per-episode reward (KL itself is 0 outside training).
    pub alpha: f64,
    pub seed: u64,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Infer,
            fan_out: crate::refine::DEFAULT_FAN_OUT,
            tracker: TrackerParams::default(),
            stop_policy: StopPolicy::FixedTurns,
            refiner_query: RefinerQuery::Turn,
            alpha: crate::reward::DEFAULT_ALPHA,
            seed: 0,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum EpisodeError {
    #[error("training episode for sample `{0}` has no gold support")]
    NoGold(String),
    #[error("sample `{sample}` references unknown passage `{passage}`")]
    UnknownGold { sample: String, passage: String },
    #[error("n_max must be at least 1")]
    ZeroTurnCap,
    #[error("tracker: {0}")]
    Tracker(#[from] crate::tracker::TrackerError),
}

/// Shared, read-only resources of an episode.
#[derive(Clone, Copy)]
pub struct Pipeline<'a> {
    pub store: &'a CorpusStore,
    pub index: &'a VectorIndex,
    pub provider: &'a dyn EmbeddingProvider,
    pub refiner: &'a Refiner,
    pub backends: &'a Backends,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub propose_s: f64,
    pub retrieve_s: f64,
    pub refine_s: f64,
    pub track_s: f64,
    pub answer_s: f64,
}

fn add(slot: &mut f64, d: Duration) {
    *slot += d.as_secs_f64();
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackerSummary {
    pub distances: Vec<f64>,
    pub accumulated: f64,
    pub remaining_gold: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub schema_version: u32,
    pub sample_id: String,
    pub mode: Mode,
    pub transcript: ImTranscript,
    #[serde(default)]
    pub actions: Vec<ActionInfo>,
    #[serde(default)]
    pub tracker: Option<TrackerSummary>,
    #[serde(default)]
    pub reward: Option<RewardBreakdown>,
    #[serde(default)]
    pub decision: Option<RoleDecision>,
    /// Ids of every refined passage shown to the reasoner, first-seen order.
    #[serde(default)]
    pub retrieved_ids: Vec<String>,
    #[serde(default)]
    pub error: Option<String>,
    /// Wall-clock stage durations; kept out of the transcript file.
    #[serde(skip)]
    pub timings: StageTimings,
}

impl EpisodeResult {
    pub fn failed(sample_id: &str, question: &str, mode: Mode, error: String) -> Self {
        Self {
            schema_version: RESULT_SCHEMA_VERSION,
            sample_id: sample_id.to_string(),
            mode,
            transcript: ImTranscript::new(question),
            actions: Vec::new(),
            tracker: None,
            reward: None,
            decision: None,
            retrieved_ids: Vec::new(),
            error: Some(error),
            timings: StageTimings::default(),
        }
    }

    pub fn prediction(&self) -> &str {
        self.transcript.final_answer.as_deref().unwrap_or("")
    }
}

/// Per-turn seed derived from the episode seed.
pub fn turn_seed(episode_seed: u64, turn: usize) -> u64 {
    let mut z = episode_seed ^ (turn as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn run_episode(
    sample: &EpisodeSample,
    pipe: Pipeline<'_>,
    config: &EpisodeConfig,
) -> Result<EpisodeResult, EpisodeError> {
    if config.tracker.n_max == 0 {
        return Err(EpisodeError::ZeroTurnCap);
    }
    let train = config.mode == Mode::Train;
    let mut tracker = if train {
        if sample.gold_support.is_empty() {
            return Err(EpisodeError::NoGold(sample.id.clone()));
        }
        let gold = sample
            .gold_support
            .iter()
            .map(|id| {
                pipe.store
                    .get(id)
                    .cloned()
                    .ok_or_else(|| EpisodeError::UnknownGold { sample: sample.id.clone(), passage: id.clone() })
            })
            .collect::<Result<Vec<_>, _>>()?;
        Some(TrackerState::new(gold, pipe.provider, config.tracker)?)
    } else {
        None
    };

    let mut res = EpisodeResult::failed(&sample.id, &sample.question, config.mode, String::new());
    res.error = None;
    let allow_ready = !train && config.stop_policy == StopPolicy::ReasonerDeclared;

    let decision = loop {
        let turn = res.transcript.turns.len();
        let decision = match &tracker {
            Some(t) => t.decide_role(),
            None => switch_role(f64::NEG_INFINITY, turn, &config.tracker, None),
        };
        if decision.role == Role::Answerer {
            break decision;
        }

        let started = Instant::now();
        let ctx = ProposeContext { seed: turn_seed(config.seed, turn), allow_ready };
        let proposal = pipe.backends.questioner.propose(&res.transcript, ctx);
        add(&mut res.timings.propose_s, started.elapsed());
        let query = match proposal {
            Ok(Proposal::Ready) => {
                break RoleDecision { role: Role::Answerer, reason: SwitchReason::ReasonerDeclared };
            }
            Ok(Proposal::Query { query, action }) => {
                res.actions.extend(action);
                query
            }
            Err(e @ (ReasonerError::NoQuery(_) | ReasonerError::Llm(_))) => {
                let abort = matches!(e, ReasonerError::NoQuery(_));
                res.transcript.turns.push(ImTurn {
                    query: NO_QUERY_SENTINEL.into(),
                    refined: RefinedSet::empty(NO_QUERY_SENTINEL),
                    distance: tracker.as_ref().map(|_| 1.0),
                    failure: Some(e.to_string()),
                });
                if let Some(t) = tracker.as_mut() {
                    t.record_empty_turn();
                }
                if abort {
                    break RoleDecision { role: Role::Answerer, reason: SwitchReason::QuestionerFailed };
                }
                continue;
            }
            Err(e) => return Ok(finish_failed(res, tracker.as_ref(), e.to_string())),
        };

        let started = Instant::now();
        let candidates = match retrieve(pipe.index, pipe.store, pipe.provider, &query, config.fan_out) {
            Ok(c) => c,
            Err(e) => return Ok(finish_failed(res, tracker.as_ref(), e.to_string())),
        };
        add(&mut res.timings.retrieve_s, started.elapsed());

        let started = Instant::now();
        let rank_against = match config.refiner_query {
            RefinerQuery::Turn => query.as_str(),
            RefinerQuery::Question => sample.question.as_str(),
        };
        let mut refined = match pipe.refiner.refine(rank_against, &candidates) {
            Ok(r) => r,
            Err(e) => return Ok(finish_failed(res, tracker.as_ref(), e.to_string())),
        };
        refined.query = query.clone();
        add(&mut res.timings.refine_s, started.elapsed());

        for p in &refined.passages {
            if !res.retrieved_ids.contains(&p.id) {
                res.retrieved_ids.push(p.id.clone());
            }
        }

        let started = Instant::now();
        let distance = match (tracker.as_mut(), refined.top()) {
            (Some(t), Some(top)) => Some(t.score_turn_mut(top, pipe.provider)?.1),
            (Some(t), None) => {
                t.record_empty_turn();
                Some(1.0)
            }
            (None, _) => None,
        };
        add(&mut res.timings.track_s, started.elapsed());
        res.transcript.turns.push(ImTurn { query, refined, distance, failure: None });
    };
    res.decision = Some(decision);

    let started = Instant::now();
    let answer = pipe.backends.answerer.answer(&res.transcript);
    add(&mut res.timings.answer_s, started.elapsed());
    match answer {
        Ok(a) => res.transcript.final_answer = Some(a),
        Err(e) => return Ok(finish_failed(res, tracker.as_ref(), e.to_string())),
    }

    if let Some(t) = &tracker {
        res.tracker = Some(summary(t));
        let f1 = answer_f1(res.prediction(), &sample.answer).f1;
        res.reward = Some(compose_reward(t.distances(), config.tracker.gamma, f1, 0.0, config.alpha));
    }
    Ok(res)
}

fn summary(t: &TrackerState) -> TrackerSummary {
    TrackerSummary {
        distances: t.distances().to_vec(),
        accumulated: t.accumulated_score(),
        remaining_gold: t.remaining_gold().map(|p| p.id.clone()).collect(),
    }
}

fn finish_failed(mut res: EpisodeResult, tracker: Option<&TrackerState>, error: String) -> EpisodeResult {
    res.tracker = tracker.map(summary);
    res.error = Some(error);
    res
}

/// Runs every sample with seed `config.seed + index` on up to `parallelism`
/// threads. Output order matches input order.
pub fn run_dataset(
    samples: &[EpisodeSample],
    pipe: Pipeline<'_>,
    config: &EpisodeConfig,
    parallelism: usize,
) -> Vec<EpisodeResult> {
    let run_one = |(i, sample): (usize, &EpisodeSample)| {
        let cfg = EpisodeConfig { seed: config.seed.wrapping_add(i as u64), ..config.clone() };
        run_episode(sample, pipe, &cfg)
            .unwrap_or_else(|e| EpisodeResult::failed(&sample.id, &sample.question, config.mode, e.to_string()))
    };
    if parallelism <= 1 {
        return samples.iter().enumerate().map(run_one).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new().num_threads(parallelism).build().expect("thread pool");
    pool.install(|| samples.par_iter().enumerate().map(run_one).collect())
}

pub fn write_results_jsonl(results: &[EpisodeResult], path: &Path) -> std::io::Result<()> {
    let mut out = std::io::BufWriter::new(fs::File::create(path)?);
    for r in results {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

pub fn write_timings_jsonl(results: &[EpisodeResult], path: &Path) -> std::io::Result<()> {
    let mut out = std::io::BufWriter::new(fs::File::create(path)?);
    for r in results {
        let row = serde_json::json!({ "sample_id": r.sample_id, "timings": r.timings });
        serde_json::to_writer(&mut out, &row)?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

pub fn read_results_jsonl(path: &Path) -> anyhow::Result<Vec<EpisodeResult>> {
    let file = std::io::BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in file.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let r: EpisodeResult =
            serde_json::from_str(&line).map_err(|e| anyhow::anyhow!("{}:{}: {e}", path.display(), i + 1))?;
        if r.schema_version != RESULT_SCHEMA_VERSION {
            anyhow::bail!("{}:{}: unsupported schema version {}", path.display(), i + 1, r.schema_version);
        }
        out.push(r);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Passage;
    use crate::embed::HashEmbedder;
    use crate::index::IndexVariant;
    use crate::llm::testing::CannedChat;
    use crate::llm::LlmError;
    use crate::reasoner::{LlmReasoner, ScriptedReasoner, ShortestTitleAnswerer};
    use std::sync::Arc;

    struct World {
        store: CorpusStore,
        index: VectorIndex,
        provider: HashEmbedder,
        refiner: Refiner,
    }

    fn world() -> World {
        let mut passages = vec![
            Passage {
                id: "g1".into(),
                title: "Alabama Crimson Tide".into(),
                text: "crimson tide football team plays in tuscaloosa".into(),
            },
            Passage { id: "g2".into(), title: "Big Al".into(), text: "big al elephant mascot costume".into() },
        ];
        passages.push(Passage {
            id: "g3".into(),
            title: "Tuscaloosa".into(),
            text: "river city western county seat".into(),
        });
        for i in 0..8 {
            passages.push(Passage {
                id: format!("n{i}"),
                title: format!("Noise {i}"),
                text: format!("unrelated filler words number{i} quartz{i} marsh{i}"),
            });
        }
        let sample = EpisodeSample {
            id: "s1".into(),
            question: "who is the mascot of the crimson tide".into(),
            gold_support: vec!["g1".into(), "g2".into()],
            answer: "Big Al".into(),
        };
        let store = CorpusStore::from_parts(passages, vec![sample]).unwrap();
        let provider = HashEmbedder::default();
        let index = VectorIndex::build(&store, &provider, IndexVariant::Exact).unwrap();
        World { store, index, provider, refiner: Refiner::identity(5) }
    }

    fn pipe<'a>(w: &'a World, b: &'a Backends) -> Pipeline<'a> {
        Pipeline { store: &w.store, index: &w.index, provider: &w.provider, refiner: &w.refiner, backends: b }
    }

    fn scripted(queries: &[&str]) -> Backends {
        let r = Arc::new(ScriptedReasoner::single("who is the mascot of the crimson tide", queries, "Big Al"));
        Backends { questioner: r.clone(), answerer: r }
    }

    fn train_cfg(phi_r: f64, n_max: usize) -> EpisodeConfig {
        EpisodeConfig {
            mode: Mode::Train,
            tracker: TrackerParams { gamma: 0.9, phi_r, n_max },
            ..EpisodeConfig::default()
        }
    }

    fn untimed(mut r: EpisodeResult) -> EpisodeResult {
        r.timings = StageTimings::default();
        r
    }

    const PERFECT: [&str; 2] = ["crimson tide football team plays in tuscaloosa", "big al elephant mascot costume"];

    #[test]
    fn single_perfect_turn_exceeds_threshold() {
        let w = world();
        let b = scripted(&PERFECT);
        let r = run_episode(&w.store.samples()[0], pipe(&w, &b), &train_cfg(0.3, 3)).unwrap();
        assert_eq!(r.transcript.turns.len(), 1);
        let t = r.tracker.unwrap();
        assert_eq!(t.distances.len(), 1);
        assert!(t.distances[0].abs() < 1e-9);
        assert!((t.accumulated - 0.9).abs() < 1e-9);
        assert_eq!(r.decision.unwrap().reason, SwitchReason::AboveThreshold);
        assert_eq!(r.transcript.final_answer.as_deref(), Some("Big Al"));
    }

    #[test]
    fn two_perfect_turns_with_high_threshold() {
        let w = world();
        let b = scripted(&PERFECT);
        let r = run_episode(&w.store.samples()[0], pipe(&w, &b), &train_cfg(1.7, 3)).unwrap();
        assert_eq!(r.transcript.turns.len(), 2);
        let t = r.tracker.unwrap();
        assert!(t.distances.iter().all(|d| d.abs() < 1e-9));
        assert!((t.accumulated - 1.71).abs() < 1e-9);
        assert!(t.remaining_gold.is_empty());
        let reward = r.reward.unwrap();
        assert!((reward.total - (1.71 + 1.0)).abs() < 1e-9);
    }

    #[test]
    fn irrelevant_queries_hit_turn_cap() {
        let w = world();
        let b = scripted(&["quartz1 marsh1", "quartz2 marsh2", "quartz3 marsh3", "extra"]);
        // three gold passages so that gold never runs out before the cap
        let mut sample = w.store.samples()[0].clone();
        sample.gold_support.push("g3".into());
        let r = run_episode(&sample, pipe(&w, &b), &train_cfg(0.3, 3)).unwrap();
        assert_eq!(r.transcript.turns.len(), 3);
        assert_eq!(r.decision.unwrap().reason, SwitchReason::TurnCap);
        assert!(r.tracker.unwrap().distances.iter().all(|d| *d > 0.5));
    }

    #[test]
    fn inference_ignores_gold() {
        let w = world();
        let b = scripted(&PERFECT);
        let cfg = EpisodeConfig { tracker: TrackerParams { n_max: 2, ..Default::default() }, ..Default::default() };
        let mut sample = w.store.samples()[0].clone();
        let a = run_episode(&sample, pipe(&w, &b), &cfg).unwrap();
        sample.gold_support = vec!["no-such-passage".into()];
        sample.answer = "different".into();
        let c = run_episode(&sample, pipe(&w, &b), &cfg).unwrap();
        assert_eq!(untimed(a.clone()), untimed(c));
        assert!(a.reward.is_none() && a.tracker.is_none());
        assert_eq!(a.transcript.turns.len(), 2);
        assert_eq!(a.decision.unwrap().reason, SwitchReason::TurnCap);
    }

    #[test]
    fn reasoner_declared_stop() {
        let w = world();
        let b = scripted(&PERFECT[..1]);
        let cfg = EpisodeConfig { stop_policy: StopPolicy::ReasonerDeclared, ..Default::default() };
        let r = run_episode(&w.store.samples()[0], pipe(&w, &b), &cfg).unwrap();
        assert_eq!(r.transcript.turns.len(), 1);
        assert_eq!(r.decision.unwrap().reason, SwitchReason::ReasonerDeclared);
    }

    #[test]
    fn train_requires_gold() {
        let w = world();
        let b = scripted(&PERFECT);
        let mut sample = w.store.samples()[0].clone();
        sample.gold_support.clear();
        assert!(matches!(run_episode(&sample, pipe(&w, &b), &train_cfg(0.3, 3)), Err(EpisodeError::NoGold(_))));
    }

    #[test]
    fn script_exhaustion_fails_episode_with_partial_transcript() {
        let w = world();
        let b = scripted(&["quartz1 marsh1"]);
        let r = run_episode(&w.store.samples()[0], pipe(&w, &b), &train_cfg(0.3, 3)).unwrap();
        assert!(r.error.unwrap().contains("exhausted"));
        assert_eq!(r.transcript.turns.len(), 1);
        assert!(r.transcript.final_answer.is_none());
    }

    #[test]
    fn unusable_llm_query_aborts_to_answerer() {
        let w = world();
        let chat = Arc::new(CannedChat::ok(&["\n\n"]));
        let b = Backends { questioner: Arc::new(LlmReasoner::new(chat, 1)), answerer: Arc::new(ShortestTitleAnswerer) };
        let r = run_episode(&w.store.samples()[0], pipe(&w, &b), &train_cfg(0.3, 3)).unwrap();
        assert!(r.error.is_none());
        assert_eq!(r.transcript.turns.len(), 1);
        assert!(r.transcript.turns[0].failure.is_some());
        assert_eq!(r.decision.unwrap().reason, SwitchReason::QuestionerFailed);
        assert_eq!(r.tracker.unwrap().distances, vec![1.0]);
    }

    #[test]
    fn llm_transport_failure_consumes_turn() {
        let w = world();
        let chat = Arc::new(CannedChat::new(vec![
            Err(LlmError::Transport("down".into())),
            Ok("Query: big al elephant mascot costume".into()),
        ]));
        let b = Backends { questioner: Arc::new(LlmReasoner::new(chat, 1)), answerer: Arc::new(ShortestTitleAnswerer) };
        let cfg = EpisodeConfig { tracker: TrackerParams { n_max: 2, ..Default::default() }, ..Default::default() };
        let r = run_episode(&w.store.samples()[0], pipe(&w, &b), &cfg).unwrap();
        assert_eq!(r.transcript.turns.len(), 2);
        assert!(r.transcript.turns[0].failure.is_some());
        assert_eq!(r.transcript.final_answer.as_deref(), Some("Big Al"));
    }

    #[test]
    fn dataset_order_and_parallel_determinism() {
        let w = world();
        let b = scripted(&PERFECT);
        let samples: Vec<EpisodeSample> =
            (0..10).map(|i| EpisodeSample { id: format!("s{i}"), ..w.store.samples()[0].clone() }).collect();
        let cfg = train_cfg(0.3, 3);
        let serial = run_dataset(&samples, pipe(&w, &b), &cfg, 1);
        let parallel = run_dataset(&samples, pipe(&w, &b), &cfg, 4);
        assert_eq!(
            serial.into_iter().map(untimed).collect::<Vec<_>>(),
            parallel.into_iter().map(untimed).collect::<Vec<_>>()
        );
        let ids: Vec<String> = run_dataset(&samples, pipe(&w, &b), &cfg, 3).into_iter().map(|r| r.sample_id).collect();
        assert_eq!(ids, (0..10).map(|i| format!("s{i}")).collect::<Vec<_>>());
        assert!(run_dataset(&[], pipe(&w, &b), &cfg, 4).is_empty());
    }

    #[test]
    fn results_roundtrip_through_jsonl() {
        let w = world();
        let b = scripted(&PERFECT);
        let results = run_dataset(w.store.samples(), pipe(&w, &b), &train_cfg(1.7, 3), 1);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.jsonl");
        write_results_jsonl(&results, &path).unwrap();
        let back = read_results_jsonl(&path).unwrap();
        assert_eq!(back, results.into_iter().map(untimed).collect::<Vec<_>>());
    }
}
