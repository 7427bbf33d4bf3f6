//! Progress tracker: per-turn distance of the refiner's top passage to the
//! closest remaining gold passage, gold-set consumption, the discounted
//! accumulated score and the questioner/answerer switch.

use serde::{Deserialize, Serialize};

use crate::corpus::Passage;
use crate::embed::{cosine, EmbedError, Embedding, EmbeddingProvider};

pub const DEFAULT_GAMMA: f64 = 0.9;
pub const DEFAULT_PHI_R: f64 = 0.3;
pub const DEFAULT_N_MAX: usize = 3;

#[derive(Debug, thiserror::Error)]
pub enum TrackerError {
    #[error("no gold passages remain")]
    NoGoldRemaining,
    #[error(transparent)]
    Embed(#[from] EmbedError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrackerParams {
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default = "default_phi_r")]
    pub phi_r: f64,
    #[serde(default = "default_n_max")]
    pub n_max: usize,
}

fn default_gamma() -> f64 {
    DEFAULT_GAMMA
}
fn default_phi_r() -> f64 {
    DEFAULT_PHI_R
}
fn default_n_max() -> usize {
    DEFAULT_N_MAX
}

impl Default for TrackerParams {
    fn default() -> Self {
        Self { gamma: DEFAULT_GAMMA, phi_r: DEFAULT_PHI_R, n_max: DEFAULT_N_MAX }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Role {
    Questioner,
    Answerer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SwitchReason {
    BelowThreshold,
    AboveThreshold,
    TurnCap,
    GoldExhausted,
    ReasonerDeclared,
    /// The questioner produced no usable query.
    QuestionerFailed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoleDecision {
    pub role: Role,
    pub reason: SwitchReason,
}

impl RoleDecision {
    pub fn is_questioner(&self) -> bool {
        self.role == Role::Questioner
    }
}

/// D = Σ_{i=1..n} γ^i · (1 − d_i).
pub fn accumulated(distances: &[f64], gamma: f64) -> f64 {
    let mut weight = 1.0;
    let mut total = 0.0;
    for d in distances {
        weight *= gamma;
        total += weight * (1.0 - d);
    }
    total
}

/// The switch rule with an optional gold-exhaustion guard:
/// questioner iff D ≤ φ_r and turn < N_max (and gold remains, when tracked).
pub fn switch_role(
    accumulated: f64,
    turn: usize,
    params: &TrackerParams,
    gold_remaining: Option<usize>,
) -> RoleDecision {
    let reason = if accumulated > params.phi_r {
        SwitchReason::AboveThreshold
    } else if turn >= params.n_max {
        SwitchReason::TurnCap
    } else if gold_remaining == Some(0) {
        SwitchReason::GoldExhausted
    } else {
        return RoleDecision { role: Role::Questioner, reason: SwitchReason::BelowThreshold };
    };
    RoleDecision { role: Role::Answerer, reason }
}

#[derive(Debug, Clone)]
struct GoldEntry {
    passage: Passage,
    embedding: Embedding,
}

/// Training-mode tracker state. Gold embeddings are computed once per
/// episode; each scored turn consumes the matched gold passage.
#[derive(Debug, Clone)]
pub struct TrackerState {
    remaining: Vec<GoldEntry>,
    distances: Vec<f64>,
    params: TrackerParams,
}

impl TrackerState {
    pub fn new(
        gold: Vec<Passage>,
        provider: &dyn EmbeddingProvider,
        params: TrackerParams,
    ) -> Result<Self, TrackerError> {
        let texts: Vec<&str> = gold.iter().map(|p| p.text.as_str()).collect();
        let embeddings = provider.embed_batch(&texts)?;
        let remaining =
            gold.into_iter().zip(embeddings).map(|(passage, embedding)| GoldEntry { passage, embedding }).collect();
        Ok(Self { remaining, distances: Vec::new(), params })
    }

    pub fn remaining_gold(&self) -> impl Iterator<Item = &Passage> {
        self.remaining.iter().map(|g| &g.passage)
    }

    pub fn remaining_len(&self) -> usize {
        self.remaining.len()
    }

    pub fn distances(&self) -> &[f64] {
        &self.distances
    }

    pub fn turn(&self) -> usize {
        self.distances.len()
    }

    pub fn params(&self) -> &TrackerParams {
        &self.params
    }

    fn closest_index(&self, pr: &Embedding) -> Result<(usize, f64), TrackerError> {
        let mut best: Option<(usize, f64)> = None;
        for (i, g) in self.remaining.iter().enumerate() {
            let sim = cosine(pr, &g.embedding)?;
            best = match best {
                None => Some((i, sim)),
                Some((j, s)) => {
                    let better = sim > s || (sim == s && g.passage.id < self.remaining[j].passage.id);
                    Some(if better { (i, sim) } else { (j, s) })
                }
            };
        }
        best.ok_or(TrackerError::NoGoldRemaining)
    }

    /// Remaining gold passage most similar to `pr`, ties by ascending id.
    pub fn closest_gold(&self, pr: &Passage, provider: &dyn EmbeddingProvider) -> Result<(Passage, f64), TrackerError> {
        if self.remaining.is_empty() {
            return Err(TrackerError::NoGoldRemaining);
        }
        let e = provider.embed(&pr.text)?;
        let (i, sim) = self.closest_index(&e)?;
        Ok((self.remaining[i].passage.clone(), sim))
    }

    /// Scores a turn: d = 1 − cos(pr, closest); the closest gold is removed.
    pub fn score_turn(
        &self,
        pr: &Passage,
        provider: &dyn EmbeddingProvider,
    ) -> Result<(f64, TrackerState), TrackerError> {
        let mut next = self.clone();
        let d = next.score_turn_mut(pr, provider)?.1;
        Ok((d, next))
    }

    /// In-place variant of [`score_turn`](Self::score_turn); returns the
    /// matched gold passage and the distance.
    pub fn score_turn_mut(
        &mut self,
        pr: &Passage,
        provider: &dyn EmbeddingProvider,
    ) -> Result<(Passage, f64), TrackerError> {
        if self.remaining.is_empty() {
            return Err(TrackerError::NoGoldRemaining);
        }
        let e = provider.embed(&pr.text)?;
        let (i, sim) = self.closest_index(&e)?;
        let d = (1.0 - sim).clamp(0.0, 2.0);
        let gold = self.remaining.remove(i).passage;
        self.distances.push(d);
        Ok((gold, d))
    }

    /// Records a turn that produced no passage. It scores as orthogonal
    /// (d = 1) and consumes no gold.
    pub fn record_empty_turn(&mut self) {
        self.distances.push(1.0);
    }

    pub fn accumulated_score(&self) -> f64 {
        accumulated(&self.distances, self.params.gamma)
    }

    pub fn decide_role(&self) -> RoleDecision {
        switch_role(self.accumulated_score(), self.turn(), &self.params, Some(self.remaining.len()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed::HashEmbedder;

    fn p(id: &str, text: &str) -> Passage {
        Passage { id: id.into(), title: id.to_uppercase(), text: text.into() }
    }

    fn params() -> TrackerParams {
        TrackerParams::default()
    }

    #[test]
    fn singleton_gold_is_closest() {
        let e = HashEmbedder::default();
        let st = TrackerState::new(vec![p("g", "completely unrelated")], &e, params()).unwrap();
        let (g, _) = st.closest_gold(&p("x", "something else entirely"), &e).unwrap();
        assert_eq!(g.id, "g");
    }

    #[test]
    fn identical_text_is_perfect() {
        let e = HashEmbedder::default();
        let st = TrackerState::new(vec![p("g1", "alpha beta"), p("g2", "gamma delta epsilon")], &e, params()).unwrap();
        let (g, sim) = st.closest_gold(&p("x", "gamma delta epsilon"), &e).unwrap();
        assert_eq!(g.id, "g2");
        assert!((sim - 1.0).abs() < 1e-9);
        let (d, next) = st.score_turn(&p("x", "gamma delta epsilon"), &e).unwrap();
        assert!(d.abs() < 1e-9);
        assert_eq!(next.remaining_gold().map(|g| g.id.as_str()).collect::<Vec<_>>(), ["g1"]);
        assert_eq!(next.turn(), 1);
        assert_eq!(st.turn(), 0);
    }

    #[test]
    fn closest_matches_exhaustive_scan() {
        let e = HashEmbedder::default();
        let gold = vec![
            p("p1", "orange violet maroon crimson"),
            p("p2", "granite basalt quartz shale"),
            p("p3", "violet falcon heron eagle"),
        ];
        let pr = p("pr", "orange maroon falcon");
        let st = TrackerState::new(gold.clone(), &e, params()).unwrap();
        let (g, sim) = st.closest_gold(&pr, &e).unwrap();
        let pe = e.embed(&pr.text).unwrap();
        let scan: Vec<f64> = gold.iter().map(|g| cosine(&pe, &e.embed(&g.text).unwrap()).unwrap()).collect();
        let best = (0..3).max_by(|&a, &b| scan[a].total_cmp(&scan[b]).then(b.cmp(&a))).unwrap();
        assert_eq!(g.id, gold[best].id);
        assert_eq!(g.id, "p1");
        assert_eq!(sim, scan[best]);
    }

    #[test]
    fn distance_from_half_angle_cosine() {
        // Two-bucket embedder stand-in: exact vectors (1,0) and (√2/2, √2/2).
        struct Fixed;
        impl EmbeddingProvider for Fixed {
            fn dim(&self) -> usize {
                2
            }
            fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Embedding>, EmbedError> {
                let h = std::f32::consts::FRAC_1_SQRT_2;
                Ok(texts
                    .iter()
                    .map(|t| Embedding::from_raw(if *t == "gold" { vec![1.0, 0.0] } else { vec![h, h] }))
                    .collect())
            }
        }
        let st = TrackerState::new(vec![p("g", "gold")], &Fixed, params()).unwrap();
        let (d, _) = st.score_turn(&p("x", "other"), &Fixed).unwrap();
        assert!((d - 0.292_89).abs() < 1e-5, "{d}");
        assert!((d - (1.0 - std::f64::consts::FRAC_1_SQRT_2)).abs() < 1e-6);
    }

    #[test]
    fn two_perfect_turns_exhaust_gold() {
        let e = HashEmbedder::default();
        let mut st = TrackerState::new(vec![p("a", "red green"), p("b", "blue yellow")], &e, params()).unwrap();
        st.score_turn_mut(&p("x", "blue yellow"), &e).unwrap();
        st.score_turn_mut(&p("y", "red green"), &e).unwrap();
        assert!(st.distances().iter().all(|d| d.abs() < 1e-9));
        assert_eq!(st.remaining_len(), 0);
        assert!(matches!(st.score_turn(&p("z", "red"), &e), Err(TrackerError::NoGoldRemaining)));
        assert_eq!(st.decide_role().reason, SwitchReason::AboveThreshold);
    }

    #[test]
    fn turn_order_matters_when_closest_is_shared() {
        let e = HashEmbedder::default();
        let gold = vec![p("g1", "lion tiger"), p("g2", "lion zebra giraffe okapi")];
        let a = p("a", "lion tiger");
        let b = p("b", "lion");
        let run = |order: [&Passage; 2]| {
            let mut st = TrackerState::new(gold.clone(), &e, params()).unwrap();
            order.iter().map(|x| st.score_turn_mut(x, &e).unwrap().1).collect::<Vec<_>>()
        };
        let ab = run([&a, &b]);
        let ba = run([&b, &a]);
        assert_ne!(ab, ba);
    }

    #[test]
    fn accumulated_examples() {
        assert_eq!(accumulated(&[], 0.9), 0.0);
        assert!((accumulated(&[0.0], 0.9) - 0.9).abs() < 1e-12);
        assert!((accumulated(&[0.2, 0.5], 0.9) - 1.125).abs() < 1e-12);
    }

    #[test]
    fn switch_examples() {
        let pr = params();
        assert_eq!(switch_role(0.0, 1, &pr, Some(1)).role, Role::Questioner);
        assert_eq!(
            switch_role(0.35, 1, &pr, Some(1)),
            RoleDecision { role: Role::Answerer, reason: SwitchReason::AboveThreshold }
        );
        assert_eq!(
            switch_role(0.1, 3, &pr, Some(1)),
            RoleDecision { role: Role::Answerer, reason: SwitchReason::TurnCap }
        );
        assert_eq!(switch_role(0.1, 1, &pr, Some(0)).reason, SwitchReason::GoldExhausted);
        assert_eq!(switch_role(0.1, 1, &pr, None).role, Role::Questioner);
    }

    #[test]
    fn accumulated_monotone_for_nonnegative_terms() {
        let ds = [0.3, 0.9, 0.0, 1.0, 0.5];
        let mut prev = 0.0;
        for n in 1..=ds.len() {
            let d = accumulated(&ds[..n], 0.9);
            assert!(d >= prev);
            prev = d;
        }
    }
}
