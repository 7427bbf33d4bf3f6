//! Retriever and Refiner stages: dense top-n fetch, then rerank/filter down
//! to the top-k evidence passages for the turn.

use std::collections::HashSet;
use std::sync::{Arc, LazyLock};

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::corpus::{normalized_tokens, CorpusStore, Passage};
use crate::embed::{EmbedError, EmbeddingProvider};
use crate::index::{IndexError, VectorIndex};
use crate::llm::{complete_with_retry, ChatClient, ChatMessage, EndpointConfig};

pub const DEFAULT_FAN_OUT: usize = 20;
pub const DEFAULT_TOP_K: usize = 5;
const LISTWISE_MAX_TOKENS: usize = 512;

#[derive(Debug, thiserror::Error)]
pub enum RefineError {
    #[error("query is empty")]
    EmptyQuery,
    #[error("retrieval fan-out must be at least 1")]
    ZeroFanOut,
    #[error("refiner received no candidates")]
    NoCandidates,
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error("index returned passage `{0}` missing from the corpus")]
    MissingPassage(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub passage: Passage,
    pub score: f64,
}

/// Embeds `query` and resolves the top-`n` hits to passages.
pub fn retrieve(
    index: &VectorIndex,
    store: &CorpusStore,
    provider: &dyn EmbeddingProvider,
    query: &str,
    n: usize,
) -> Result<Vec<Candidate>, RefineError> {
    if query.trim().is_empty() {
        return Err(RefineError::EmptyQuery);
    }
    if n == 0 {
        return Err(RefineError::ZeroFanOut);
    }
    let q = provider.embed(query)?;
    index
        .search(&q, n)?
        .into_iter()
        .map(|hit| {
            let passage = store
                .get(&hit.passage_id)
                .cloned()
                .ok_or_else(|| RefineError::MissingPassage(hit.passage_id.clone()))?;
            Ok(Candidate { passage, score: hit.score })
        })
        .collect()
}

/// Evidence handed back to the reasoner for one turn. `passages[0]` is the
/// turn's top passage scored by the progress tracker.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinedSet {
    pub query: String,
    pub passages: Vec<Passage>,
    /// Retriever score of each kept passage.
    pub origin_scores: Vec<f64>,
    /// Set when the refiner fell back to retriever order.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fallback: Option<String>,
}

impl RefinedSet {
    pub fn empty(query: impl Into<String>) -> Self {
        Self { query: query.into(), passages: Vec::new(), origin_scores: Vec::new(), fallback: None }
    }

    pub fn top(&self) -> Option<&Passage> {
        self.passages.first()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum RefinerStrategy {
    Identity,
    #[default]
    Lexical,
    LlmListwise {
        endpoint: EndpointConfig,
    },
}

pub struct Refiner {
    strategy: RefinerStrategy,
    top_k: usize,
    client: Option<Arc<dyn ChatClient>>,
    retries: usize,
}

impl Refiner {
    pub fn new(strategy: RefinerStrategy, top_k: usize) -> Self {
        assert!(top_k >= 1, "refiner top_k must be at least 1");
        let (client, retries) = match &strategy {
            RefinerStrategy::LlmListwise { endpoint } => (Some(endpoint.build()), endpoint.retries),
            _ => (None, 0),
        };
        Self { strategy, top_k, client, retries }
    }

    pub fn identity(top_k: usize) -> Self {
        Self::new(RefinerStrategy::Identity, top_k)
    }

    pub fn lexical(top_k: usize) -> Self {
        Self::new(RefinerStrategy::Lexical, top_k)
    }

    /// Listwise reranker backed by an arbitrary chat client.
    pub fn listwise(client: Arc<dyn ChatClient>, top_k: usize, retries: usize) -> Self {
        assert!(top_k >= 1, "refiner top_k must be at least 1");
        Self {
            strategy: RefinerStrategy::LlmListwise { endpoint: EndpointConfig::new("injected", "injected") },
            top_k,
            client: Some(client),
            retries,
        }
    }

    pub fn top_k(&self) -> usize {
        self.top_k
    }

    pub fn strategy(&self) -> &RefinerStrategy {
        &self.strategy
    }

    pub fn refine(&self, query: &str, candidates: &[Candidate]) -> Result<RefinedSet, RefineError> {
        if candidates.is_empty() {
            return Err(RefineError::NoCandidates);
        }
        let (order, fallback) = match &self.strategy {
            RefinerStrategy::Identity => ((0..candidates.len()).collect(), None),
            RefinerStrategy::Lexical => (lexical_order(query, candidates), None),
            RefinerStrategy::LlmListwise { .. } => self.listwise_order(query, candidates),
        };
        let mut set = RefinedSet::empty(query);
        set.fallback = fallback;
        for i in order.into_iter().take(self.top_k) {
            set.passages.push(candidates[i].passage.clone());
            set.origin_scores.push(candidates[i].score);
        }
        Ok(set)
    }

    fn listwise_order(&self, query: &str, candidates: &[Candidate]) -> (Vec<usize>, Option<String>) {
        let client = self.client.as_ref().expect("listwise refiner has a client");
        let input_order = || (0..candidates.len()).collect::<Vec<_>>();
        let messages = listwise_prompt(query, candidates);
        match complete_with_retry(client.as_ref(), &messages, self.retries.max(1)) {
            Ok(reply) => match parse_permutation(&reply, candidates.len()) {
                Some(order) => (order, None),
                None => (input_order(), Some(format!("unparseable ranking: {}", reply.trim()))),
            },
            Err(e) => (input_order(), Some(format!("reranker unavailable: {e}"))),
        }
    }
}

/// |tokens(query) ∩ tokens(passage)| / |tokens(query)| over normalized tokens.
pub fn lexical_score(query: &str, passage: &Passage) -> f64 {
    let q: HashSet<String> = normalized_tokens(query).into_iter().collect();
    if q.is_empty() {
        return 0.0;
    }
    let p: HashSet<String> = normalized_tokens(&format!("{} {}", passage.title, passage.text)).into_iter().collect();
    q.intersection(&p).count() as f64 / q.len() as f64
}

fn lexical_order(query: &str, candidates: &[Candidate]) -> Vec<usize> {
    let scores: Vec<f64> = candidates.iter().map(|c| lexical_score(query, &c.passage)).collect();
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    // stable: ties keep retriever order
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    order
}

fn truncate_tokens(text: &str, max: usize) -> String {
    text.split_whitespace().take(max).collect::<Vec<_>>().join(" ")
}

/// Listwise ranking prompt: numbered passages, answer as `[a] > [b] > ...`.
pub fn listwise_prompt(query: &str, candidates: &[Candidate]) -> Vec<ChatMessage> {
    let n = candidates.len();
    let mut body = format!(
        "I will provide you with {n} passages, each indicated by a numerical identifier []. \
         Rank the passages based on their relevance to the search query: {query}.\n\n"
    );
    for (i, c) in candidates.iter().enumerate() {
        let text = truncate_tokens(&format!("{}: {}", c.passage.title, c.passage.text), LISTWISE_MAX_TOKENS);
        body.push_str(&format!("[{}] {}\n", i + 1, text));
    }
    body.push_str(&format!(
        "\nSearch Query: {query}.\nRank the {n} passages above based on their relevance to the search query. \
         All the passages should be included and listed using identifiers, in descending order of relevance. \
         The output format should be [] > [], e.g., [2] > [1]. Only respond with the ranking results, \
         do not say any word or explain."
    ));
    vec![
        ChatMessage::system(
            "You are an intelligent assistant that can rank passages based on their relevancy to the query.",
        ),
        ChatMessage::user(body),
    ]
}

static BRACKETED: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\[\s*(\d+)\s*\]").unwrap());
static BARE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\d+").unwrap());

/// Parses a 1-based ranking like `[2] > [1] > [3]` into a 0-based
/// permutation of `n`. Unknown and repeated indices are dropped; missing ones
/// are appended in input order. Returns `None` when no valid index appears.
pub fn parse_permutation(reply: &str, n: usize) -> Option<Vec<usize>> {
    let mut nums: Vec<&str> = BRACKETED.captures_iter(reply).map(|c| c.get(1).unwrap().as_str()).collect();
    if nums.is_empty() {
        nums = BARE.find_iter(reply).map(|m| m.as_str()).collect();
    }
    let mut seen = vec![false; n];
    let mut order = Vec::with_capacity(n);
    for s in nums {
        if let Ok(k) = s.parse::<usize>() {
            if (1..=n).contains(&k) && !seen[k - 1] {
                seen[k - 1] = true;
                order.push(k - 1);
            }
        }
    }
    if order.is_empty() {
        return None;
    }
    order.extend((0..n).filter(|&i| !seen[i]));
    Some(order)
}
