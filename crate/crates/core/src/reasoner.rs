//! The reasoner's two roles. A questioner proposes the next search query from
//! the question and the inner monologue so far; an answerer produces the
//! final answer. Backends: scripted (tests), a tabular template policy
//! (trainable toy) and an external chat endpoint.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{EpisodeSample, Passage};
use crate::episode::EpisodeResult;
use crate::llm::{complete_with_retry, ChatClient, ChatMessage, EndpointConfig, LlmError};
use crate::refine::RefinedSet;

const MAX_QUERY_TOKENS: usize = 64;
pub const SFT_INSTRUCTION: &str = "Answer the question using the search queries and evidence gathered so far. \
Respond with a short answer only.";

#[derive(Debug, thiserror::Error)]
pub enum ReasonerError {
    #[error("no script for question `{0}`")]
    NoScript(String),
    #[error("scripted queries exhausted after {0} turns")]
    ScriptExhausted(usize),
    #[error("no usable query in model output: {0}")]
    NoQuery(String),
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error("invalid policy: {0}")]
    BadPolicy(String),
    #[error("transcript already has a final answer")]
    AlreadyAnswered,
}

/// One round of the inner monologue.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImTurn {
    pub query: String,
    pub refined: RefinedSet,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub distance: Option<f64>,
    /// Why the turn failed, if it did. Failed turns carry no evidence.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImTranscript {
    pub question: String,
    pub turns: Vec<ImTurn>,
    #[serde(default)]
    pub final_answer: Option<String>,
}

impl ImTranscript {
    pub fn new(question: impl Into<String>) -> Self {
        Self { question: question.into(), turns: Vec::new(), final_answer: None }
    }

    pub fn last_refined(&self) -> Option<&RefinedSet> {
        self.turns.iter().rev().find(|t| t.failure.is_none()).map(|t| &t.refined)
    }

    /// Top passage of every successful turn, in turn order.
    pub fn top_passages(&self) -> impl Iterator<Item = &Passage> {
        self.turns.iter().filter_map(|t| t.refined.top())
    }

    /// `Q<i>: <query>` / `Evidence<i>: <title>: <text>` lines.
    pub fn serialize_im(&self) -> String {
        let mut out = String::new();
        for (i, turn) in self.turns.iter().enumerate() {
            let n = i + 1;
            out.push_str(&format!("Q{n}: {}\n", turn.query));
            for p in &turn.refined.passages {
                out.push_str(&format!("Evidence{n}: {}: {}\n", p.title, p.text));
            }
        }
        out
    }
}

/// Sampled action of the template policy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActionInfo {
    pub bucket: usize,
    pub action: usize,
    pub log_prob: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Proposal {
    Query {
        query: String,
        action: Option<ActionInfo>,
    },
    /// The questioner declares it has enough evidence.
    Ready,
}

#[derive(Debug, Clone, Copy)]
pub struct ProposeContext {
    pub seed: u64,
    /// Whether the backend may stop the loop itself.
    pub allow_ready: bool,
}

pub trait Questioner: Send + Sync {
    fn propose(&self, transcript: &ImTranscript, ctx: ProposeContext) -> Result<Proposal, ReasonerError>;
}

pub trait Answerer: Send + Sync {
    fn answer(&self, transcript: &ImTranscript) -> Result<String, ReasonerError>;
}

#[derive(Clone)]
pub struct Backends {
    pub questioner: Arc<dyn Questioner>,
    pub answerer: Arc<dyn Answerer>,
}

// ---------------------------------------------------------------- scripted

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Script {
    pub question: String,
    pub queries: Vec<String>,
    #[serde(default)]
    pub answer: String,
}

/// Replays fixed queries per question.
#[derive(Debug, Clone, Default)]
pub struct ScriptedReasoner {
    scripts: HashMap<String, Script>,
}

impl ScriptedReasoner {
    pub fn new(scripts: impl IntoIterator<Item = Script>) -> Self {
        Self { scripts: scripts.into_iter().map(|s| (s.question.clone(), s)).collect() }
    }

    pub fn single(question: &str, queries: &[&str], answer: &str) -> Self {
        Self::new([Script {
            question: question.into(),
            queries: queries.iter().map(|q| q.to_string()).collect(),
            answer: answer.into(),
        }])
    }

    pub fn load_jsonl(path: &Path) -> anyhow::Result<Self> {
        let raw = fs::read_to_string(path)?;
        let mut scripts = Vec::new();
        for (i, line) in raw.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let s: Script =
                serde_json::from_str(line).map_err(|e| anyhow::anyhow!("{}:{}: {e}", path.display(), i + 1))?;
            if s.queries.is_empty() {
                anyhow::bail!("{}:{}: script has no queries", path.display(), i + 1);
            }
            scripts.push(s);
        }
        Ok(Self::new(scripts))
    }

    fn script(&self, question: &str) -> Result<&Script, ReasonerError> {
        self.scripts.get(question).ok_or_else(|| ReasonerError::NoScript(question.to_string()))
    }
}

impl Questioner for ScriptedReasoner {
    fn propose(&self, transcript: &ImTranscript, ctx: ProposeContext) -> Result<Proposal, ReasonerError> {
        let script = self.script(&transcript.question)?;
        match script.queries.get(transcript.turns.len()) {
            Some(q) => Ok(Proposal::Query { query: q.clone(), action: None }),
            None if ctx.allow_ready => Ok(Proposal::Ready),
            None => Err(ReasonerError::ScriptExhausted(transcript.turns.len())),
        }
    }
}

impl Answerer for ScriptedReasoner {
    fn answer(&self, transcript: &ImTranscript) -> Result<String, ReasonerError> {
        Ok(self.script(&transcript.question)?.answer.clone())
    }
}

/// Issues the original question as the query (single-shot retrieval).
#[derive(Debug, Clone, Copy, Default)]
pub struct QuestionAsQuery;

impl Questioner for QuestionAsQuery {
    fn propose(&self, transcript: &ImTranscript, ctx: ProposeContext) -> Result<Proposal, ReasonerError> {
        if !transcript.turns.is_empty() && ctx.allow_ready {
            return Ok(Proposal::Ready);
        }
        Ok(Proposal::Query { query: transcript.question.clone(), action: None })
    }
}

/// Toy answerer: the shortest title among each turn's top passage.
#[derive(Debug, Clone, Copy, Default)]
pub struct ShortestTitleAnswerer;

impl Answerer for ShortestTitleAnswerer {
    fn answer(&self, transcript: &ImTranscript) -> Result<String, ReasonerError> {
        let mut best: Option<&str> = None;
        for p in transcript.top_passages() {
            if best.is_none_or(|b| p.title.chars().count() < b.chars().count()) {
                best = Some(&p.title);
            }
        }
        Ok(best.unwrap_or_default().to_string())
    }
}

// --------------------------------------------------------- template policy

/// Query templates of the toy policy. Slots come from the question and the
/// previous turn's top refined passage; a missing slot falls back to the
/// question.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QueryTemplate {
    /// The whole question.
    Question,
    /// First capitalized span of the question.
    QuestionEntity,
    /// Title of the last top passage.
    LastTitle,
    /// First capitalized span in the last top passage that is not its title.
    LastEntity,
    /// Question followed by the last top title.
    QuestionAndLastTitle,
    /// Final three question tokens.
    QuestionTail,
}

impl QueryTemplate {
    pub const ALL: [QueryTemplate; 6] = [
        QueryTemplate::Question,
        QueryTemplate::QuestionEntity,
        QueryTemplate::LastTitle,
        QueryTemplate::LastEntity,
        QueryTemplate::QuestionAndLastTitle,
        QueryTemplate::QuestionTail,
    ];

    pub fn instantiate(&self, question: &str, last: Option<&RefinedSet>) -> String {
        let top = last.and_then(RefinedSet::top);
        let filled = match self {
            QueryTemplate::Question => None,
            QueryTemplate::QuestionEntity => capitalized_spans(question).into_iter().next(),
            QueryTemplate::LastTitle => top.map(|p| p.title.clone()),
            QueryTemplate::LastEntity => {
                top.and_then(|p| capitalized_spans(&p.text).into_iter().find(|s| *s != p.title))
            }
            QueryTemplate::QuestionAndLastTitle => top.map(|p| format!("{question} {}", p.title)),
            QueryTemplate::QuestionTail => {
                let toks: Vec<&str> = question.split_whitespace().collect();
                let tail = toks[toks.len().saturating_sub(3)..].join(" ");
                Some(tail)
            }
        };
        filled.filter(|s| s.chars().any(char::is_alphanumeric)).unwrap_or_else(|| question.to_string())
    }
}

/// Maximal runs of whitespace tokens starting with an uppercase letter,
/// with edge punctuation stripped.
pub fn capitalized_spans(text: &str) -> Vec<String> {
    let mut spans = Vec::new();
    let mut cur: Vec<&str> = Vec::new();
    for raw in text.split_whitespace() {
        let tok = raw.trim_matches(|c: char| !c.is_alphanumeric());
        let cap = tok.chars().next().is_some_and(char::is_uppercase);
        if cap {
            cur.push(tok);
        }
        let ends = !cap || tok.len() != raw.len();
        if ends && !cur.is_empty() {
            spans.push(cur.join(" "));
            cur.clear();
        }
    }
    if !cur.is_empty() {
        spans.push(cur.join(" "));
    }
    spans
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    /// `[bucket][action]` logits; bucket = turn index, clamped.
    pub logits: Vec<Vec<f64>>,
    pub templates: Vec<QueryTemplate>,
}

impl PolicyParams {
    /// Uniform policy over `templates` with `buckets` rows.
    pub fn uniform(buckets: usize, templates: Vec<QueryTemplate>) -> Self {
        Self { logits: vec![vec![0.0; templates.len()]; buckets.max(1)], templates }
    }

    pub fn validate(&self) -> Result<(), ReasonerError> {
        if self.templates.len() < 2 {
            return Err(ReasonerError::BadPolicy("policy needs at least two actions".into()));
        }
        if self.logits.is_empty() {
            return Err(ReasonerError::BadPolicy("policy has no buckets".into()));
        }
        for row in &self.logits {
            if row.len() != self.templates.len() {
                return Err(ReasonerError::BadPolicy("logit row width differs from template count".into()));
            }
            if row.iter().any(|x| !x.is_finite()) {
                return Err(ReasonerError::BadPolicy("non-finite logit".into()));
            }
        }
        Ok(())
    }

    pub fn num_buckets(&self) -> usize {
        self.logits.len()
    }

    pub fn num_actions(&self) -> usize {
        self.templates.len()
    }

    pub fn bucket_for_turn(&self, turn: usize) -> usize {
        turn.min(self.logits.len() - 1)
    }

    pub fn probs(&self, bucket: usize) -> Vec<f64> {
        softmax(&self.logits[bucket])
    }

    pub fn log_prob(&self, bucket: usize, action: usize) -> f64 {
        let row = &self.logits[bucket];
        row[action] - log_sum_exp(row)
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let p: Self = serde_json::from_str(&fs::read_to_string(path)?)?;
        p.validate()?;
        Ok(p)
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)
    }
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = xs.iter().map(|x| (x - m).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Inverse-CDF draw from `probs`.
pub fn sample_index(probs: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// The trainable toy questioner.
#[derive(Debug, Clone)]
pub struct TemplatePolicy {
    params: Arc<PolicyParams>,
    greedy: bool,
}

impl TemplatePolicy {
    pub fn new(params: PolicyParams) -> Result<Self, ReasonerError> {
        params.validate()?;
        Ok(Self { params: Arc::new(params), greedy: false })
    }

    /// Always picks the most probable template (lowest index on ties).
    pub fn greedy(mut self) -> Self {
        self.greedy = true;
        self
    }

    pub fn params(&self) -> &PolicyParams {
        &self.params
    }

    pub fn choose(&self, bucket: usize, seed: u64) -> ActionInfo {
        let probs = self.params.probs(bucket);
        let action = if self.greedy {
            (0..probs.len()).fold(0, |best, i| if probs[i] > probs[best] { i } else { best })
        } else {
            sample_index(&probs, &mut ChaCha8Rng::seed_from_u64(seed))
        };
        ActionInfo { bucket, action, log_prob: self.params.log_prob(bucket, action) }
    }
}

impl Questioner for TemplatePolicy {
    fn propose(&self, transcript: &ImTranscript, ctx: ProposeContext) -> Result<Proposal, ReasonerError> {
        let bucket = self.params.bucket_for_turn(transcript.turns.len());
        let info = self.choose(bucket, ctx.seed);
        let template = self.params.templates[info.action];
        let query = template.instantiate(&transcript.question, transcript.last_refined());
        Ok(Proposal::Query { query, action: Some(info) })
    }
}

// ------------------------------------------------------------ chat backend

const QUESTIONER_SYSTEM: &str = "You are the questioner in a multi-round search process. \
Given a question and the searches made so far, write the single next search query needed to answer it. \
Reply with one line of the form `Query: <search query>`.";
const READY_HINT: &str = " If the evidence already suffices to answer, reply with `DONE` instead.";
const ANSWERER_SYSTEM: &str = "You answer questions using the evidence gathered by earlier searches. \
Reply with the answer only.";

/// Chat-endpoint reasoner. The same type serves either role.
pub struct LlmReasoner {
    client: Arc<dyn ChatClient>,
    retries: usize,
}

impl LlmReasoner {
    pub fn new(client: Arc<dyn ChatClient>, retries: usize) -> Self {
        Self { client, retries }
    }

    pub fn from_endpoint(endpoint: &EndpointConfig) -> Self {
        Self::new(endpoint.build(), endpoint.retries)
    }

    fn user_prompt(transcript: &ImTranscript, tail: &str) -> String {
        format!("Question: {}\n{}{tail}", transcript.question, transcript.serialize_im())
    }
}

/// First non-empty line, without a leading `Query:` label; rejected when
/// longer than 64 tokens.
pub fn extract_query(completion: &str) -> Option<String> {
    let line = completion.lines().map(str::trim).find(|l| !l.is_empty())?;
    let stripped = match line.get(..6) {
        Some(prefix) if prefix.eq_ignore_ascii_case("query:") => line[6..].trim(),
        _ => line,
    };
    let n = stripped.split_whitespace().count();
    (n > 0 && n <= MAX_QUERY_TOKENS).then(|| stripped.to_string())
}

fn declares_ready(query: &str) -> bool {
    let q = query.trim().trim_end_matches('.');
    q.eq_ignore_ascii_case("done") || q.to_ascii_uppercase().starts_with("[DONE]")
}

impl Questioner for LlmReasoner {
    fn propose(&self, transcript: &ImTranscript, ctx: ProposeContext) -> Result<Proposal, ReasonerError> {
        let system =
            if ctx.allow_ready { format!("{QUESTIONER_SYSTEM}{READY_HINT}") } else { QUESTIONER_SYSTEM.to_string() };
        let msgs = [ChatMessage::system(system), ChatMessage::user(Self::user_prompt(transcript, "Next query:"))];
        let reply = complete_with_retry(self.client.as_ref(), &msgs, self.retries.max(1))?;
        let query = extract_query(&reply).ok_or_else(|| ReasonerError::NoQuery(reply.clone()))?;
        if declares_ready(&query) {
            return if ctx.allow_ready { Ok(Proposal::Ready) } else { Err(ReasonerError::NoQuery(reply)) };
        }
        Ok(Proposal::Query { query, action: None })
    }
}

impl Answerer for LlmReasoner {
    fn answer(&self, transcript: &ImTranscript) -> Result<String, ReasonerError> {
        let msgs = [ChatMessage::system(ANSWERER_SYSTEM), ChatMessage::user(Self::user_prompt(transcript, "Answer:"))];
        let reply = complete_with_retry(self.client.as_ref(), &msgs, self.retries.max(1))?;
        Ok(reply.trim().to_string())
    }
}

// ---------------------------------------------------------------- SFT data

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SftRecord {
    pub instruction: String,
    pub input: String,
    pub output: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct SftSummary {
    pub written: usize,
    pub skipped: usize,
}

pub fn sft_record(transcript: &ImTranscript, gold_answer: &str) -> SftRecord {
    SftRecord {
        instruction: SFT_INSTRUCTION.to_string(),
        input: format!("Question: {}\n{}", transcript.question, transcript.serialize_im()),
        output: gold_answer.to_string(),
    }
}

/// Writes one instruction-tuning record per completed episode whose sample
/// is known. Unmatched or failed episodes are skipped and counted.
pub fn export_sft_records(
    episodes: &[EpisodeResult],
    samples: &[EpisodeSample],
    path: &Path,
) -> std::io::Result<SftSummary> {
    let by_id: HashMap<&str, &EpisodeSample> = samples.iter().map(|s| (s.id.as_str(), s)).collect();
    let mut out = std::io::BufWriter::new(fs::File::create(path)?);
    let mut summary = SftSummary::default();
    for ep in episodes {
        match by_id.get(ep.sample_id.as_str()) {
            Some(sample) if ep.error.is_none() => {
                serde_json::to_writer(&mut out, &sft_record(&ep.transcript, &sample.answer))?;
                out.write_all(b"\n")?;
                summary.written += 1;
            }
            _ => {
                log::warn!("skipping episode `{}`: no matching sample or failed episode", ep.sample_id);
                summary.skipped += 1;
            }
        }
    }
    out.flush()?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::testing::CannedChat;
    use proptest::prelude::*;

    fn ctx(seed: u64) -> ProposeContext {
        ProposeContext { seed, allow_ready: false }
    }

    fn passage(id: &str, title: &str, text: &str) -> Passage {
        Passage { id: id.into(), title: title.into(), text: text.into() }
    }

    fn turn(query: &str, passages: Vec<Passage>) -> ImTurn {
        let n = passages.len();
        ImTurn {
            query: query.into(),
            refined: RefinedSet { query: query.into(), passages, origin_scores: vec![0.5; n], fallback: None },
            distance: None,
            failure: None,
        }
    }

    fn query_of(p: Proposal) -> String {
        match p {
            Proposal::Query { query, .. } => query,
            Proposal::Ready => panic!("unexpected ready"),
        }
    }

    #[test]
    fn scripted_first_query_then_exhaustion() {
        let r = ScriptedReasoner::single("Q", &["who founded X", "when was Y built"], "yes");
        let mut t = ImTranscript::new("Q");
        assert_eq!(query_of(r.propose(&t, ctx(0)).unwrap()), "who founded X");
        t.turns.push(turn("who founded X", vec![]));
        t.turns.push(turn("when was Y built", vec![]));
        assert!(matches!(r.propose(&t, ctx(0)), Err(ReasonerError::ScriptExhausted(2))));
        let ready = r.propose(&t, ProposeContext { seed: 0, allow_ready: true }).unwrap();
        assert_eq!(ready, Proposal::Ready);
        assert_eq!(r.answer(&t).unwrap(), "yes");
    }

    #[test]
    fn template_policy_seeded_determinism() {
        let policy =
            TemplatePolicy::new(PolicyParams::uniform(2, vec![QueryTemplate::Question, QueryTemplate::QuestionTail]))
                .unwrap();
        let a: Vec<_> = (0..50).map(|s| policy.choose(0, s).action).collect();
        let b: Vec<_> = (0..50).map(|s| policy.choose(0, s).action).collect();
        assert_eq!(a, b);
        assert!(a.contains(&0) && a.contains(&1));
    }

    #[test]
    fn template_policy_sampling_matches_softmax() {
        let mut params = PolicyParams::uniform(1, vec![QueryTemplate::Question, QueryTemplate::QuestionTail]);
        params.logits[0] = vec![5.0, -5.0];
        let expected = 1.0 / (1.0 + (-10.0f64).exp());
        assert!((params.probs(0)[0] - 0.99995).abs() < 1e-5);
        let policy = TemplatePolicy::new(params).unwrap();
        let draws = 10_000;
        let zeros = (0..draws).filter(|s| policy.choose(0, *s as u64).action == 0).count();
        let freq = zeros as f64 / draws as f64;
        assert!((freq - expected).abs() <= 0.005, "{freq}");
    }

    #[test]
    fn degenerate_policy_rejected() {
        let p = PolicyParams::uniform(2, vec![QueryTemplate::Question]);
        assert!(matches!(TemplatePolicy::new(p), Err(ReasonerError::BadPolicy(_))));
        let mut p = PolicyParams::uniform(2, QueryTemplate::ALL.to_vec());
        p.logits[1][0] = f64::NAN;
        assert!(TemplatePolicy::new(p).is_err());
    }

    #[test]
    fn templates_fill_slots() {
        let q = "which town lies near the river Varno Quellik?";
        let last = RefinedSet {
            query: "x".into(),
            passages: vec![passage("p", "Varno Quellik", "Varno Quellik is a river that flows past Brix Tol .")],
            origin_scores: vec![1.0],
            fallback: None,
        };
        assert_eq!(QueryTemplate::Question.instantiate(q, Some(&last)), q);
        assert_eq!(QueryTemplate::QuestionEntity.instantiate(q, None), "Varno Quellik");
        assert_eq!(QueryTemplate::LastTitle.instantiate(q, Some(&last)), "Varno Quellik");
        assert_eq!(QueryTemplate::LastEntity.instantiate(q, Some(&last)), "Brix Tol");
        assert_eq!(QueryTemplate::LastEntity.instantiate(q, None), q);
        assert_eq!(QueryTemplate::QuestionAndLastTitle.instantiate(q, Some(&last)), format!("{q} Varno Quellik"));
        assert_eq!(QueryTemplate::QuestionTail.instantiate(q, None), "river Varno Quellik?");
    }

    #[test]
    fn capitalized_span_extraction() {
        assert_eq!(
            capitalized_spans("Big Al is the mascot of Alabama Crimson Tide."),
            ["Big Al", "Alabama Crimson Tide"]
        );
        assert_eq!(capitalized_spans("Paris, France"), ["Paris", "France"]);
        assert!(capitalized_spans("all lower case").is_empty());
    }

    #[test]
    fn shortest_title_answer() {
        let mut t = ImTranscript::new("q");
        t.turns.push(turn("a", vec![passage("1", "Alabama Crimson Tide", "x"), passage("9", "Z", "distractor")]));
        t.turns.push(turn("b", vec![passage("2", "Big Al", "y")]));
        assert_eq!(ShortestTitleAnswerer.answer(&t).unwrap(), "Big Al");
        assert_eq!(ShortestTitleAnswerer.answer(&ImTranscript::new("q")).unwrap(), "");
    }

    #[test]
    fn question_as_query() {
        let t = ImTranscript::new("what is it");
        assert_eq!(query_of(QuestionAsQuery.propose(&t, ctx(1)).unwrap()), "what is it");
    }

    #[test]
    fn query_extraction_rule() {
        assert_eq!(extract_query("\n\nQuery: capital of France\nmore"), Some("capital of France".into()));
        assert_eq!(extract_query("  who built it  "), Some("who built it".into()));
        assert_eq!(extract_query("QUERY:   x"), Some("x".into()));
        assert_eq!(extract_query("\n \n"), None);
        assert_eq!(extract_query("Query:"), None);
        assert_eq!(extract_query(&vec!["w"; 65].join(" ")), None);
        assert!(extract_query(&vec!["w"; 64].join(" ")).is_some());
    }

    #[test]
    fn llm_questioner_and_answerer() {
        let chat = Arc::new(CannedChat::ok(&["Query: founder of X\nextra", " Paris\n", "I cannot help", "DONE"]));
        let r = LlmReasoner::new(chat.clone(), 1);
        let mut t = ImTranscript::new("Where?");
        t.turns.push(turn("first", vec![passage("1", "Title One", "Body one")]));
        assert_eq!(query_of(r.propose(&t, ctx(0)).unwrap()), "founder of X");
        assert_eq!(r.answer(&t).unwrap(), "Paris");
        let prompt = chat.prompts.lock().unwrap()[0][1].content.clone();
        assert!(prompt.contains("Question: Where?\nQ1: first\nEvidence1: Title One: Body one\n"));
        // "I cannot help" is a valid one-line query by the extraction rule.
        assert_eq!(query_of(r.propose(&t, ctx(0)).unwrap()), "I cannot help");
        assert_eq!(r.propose(&t, ProposeContext { seed: 0, allow_ready: true }).unwrap(), Proposal::Ready);
    }

    #[test]
    fn llm_no_query_is_an_error() {
        let r = LlmReasoner::new(Arc::new(CannedChat::ok(&["   \n  "])), 1);
        assert!(matches!(r.propose(&ImTranscript::new("q"), ctx(0)), Err(ReasonerError::NoQuery(_))));
    }

    #[test]
    fn sft_record_contains_turns_in_order() {
        let mut t = ImTranscript::new("Who is the mascot?");
        t.turns.push(turn("crimson tide", vec![passage("1", "Alabama Crimson Tide", "team")]));
        t.turns.push(turn("big al", vec![passage("2", "Big Al", "elephant"), passage("3", "Tuscaloosa", "city")]));
        let rec = sft_record(&t, "Big Al");
        assert_eq!(rec.output, "Big Al");
        let input = &rec.input;
        let order = ["crimson tide", "Alabama Crimson Tide", "big al", "Big Al", "Tuscaloosa"]
            .iter()
            .map(|s| input.find(s).unwrap())
            .collect::<Vec<_>>();
        assert!(order.windows(2).all(|w| w[0] < w[1]), "{input}");
    }

    fn arb_passage() -> impl Strategy<Value = Passage> {
        ("[a-z0-9]{1,6}", "[A-Za-z ]{0,10}", "\\PC{1,20}").prop_map(|(id, title, text)| Passage { id, title, text })
    }

    fn arb_turn() -> impl Strategy<Value = ImTurn> {
        (
            "[a-z ]{1,12}",
            proptest::collection::vec(arb_passage(), 0..4),
            proptest::option::of(0.0f64..2.0),
            proptest::option::of("[a-z]{1,8}"),
        )
            .prop_map(|(query, passages, distance, failure)| {
                let n = passages.len();
                ImTurn {
                    refined: RefinedSet {
                        query: query.clone(),
                        passages,
                        origin_scores: (0..n).map(|i| i as f64 / 7.0).collect(),
                        fallback: failure.clone(),
                    },
                    query,
                    distance,
                    failure,
                }
            })
    }

    proptest! {
        #[test]
        fn transcript_roundtrip(
            q in "\\PC{0,30}",
            turns in proptest::collection::vec(arb_turn(), 0..4),
            ans in proptest::option::of("\\PC{0,10}"),
        ) {
            let t = ImTranscript { question: q, turns, final_answer: ans };
            let back: ImTranscript = serde_json::from_str(&serde_json::to_string(&t).unwrap()).unwrap();
            prop_assert_eq!(back, t);
        }

        #[test]
        fn log_prob_consistent(logits in proptest::collection::vec(-20.0f64..20.0, 2..7), pick in 0usize..7) {
            let n = logits.len();
            let mut p = PolicyParams::uniform(1, QueryTemplate::ALL[..n].to_vec());
            p.logits[0] = logits;
            let a = pick % n;
            prop_assert!((p.log_prob(0, a).exp() - p.probs(0)[a]).abs() < 1e-9);
            let s: f64 = p.probs(0).iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
        }
    }
}
