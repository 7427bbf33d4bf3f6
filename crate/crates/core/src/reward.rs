//! Answer scoring, the composite episode reward, and a clipped-ratio policy
//! gradient trainer for the template questioner.

use std::collections::HashMap;
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{normalized_tokens, CorpusStore, EpisodeSample};
use crate::embed::EmbeddingProvider;
use crate::episode::{run_episode, EpisodeConfig, EpisodeResult, Mode, Pipeline};
use crate::index::VectorIndex;
use crate::reasoner::{softmax, Answerer, Backends, PolicyParams, TemplatePolicy};
use crate::refine::Refiner;

pub const DEFAULT_ALPHA: f64 = 0.2;
pub const DEFAULT_CLIP_EPSILON: f64 = 0.2;
pub const DEFAULT_LEARNING_RATE: f64 = 0.05;
pub const DEFAULT_BATCH_EPISODES: usize = 32;
pub const DEFAULT_ITERATIONS: usize = 200;
pub const DEFAULT_UPDATE_STEPS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnswerScore {
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
}

/// Token-multiset F1 over normalized answers.
pub fn answer_f1(prediction: &str, gold: &str) -> AnswerScore {
    let pred = normalized_tokens(prediction);
    let gold = normalized_tokens(gold);
    match (pred.is_empty(), gold.is_empty()) {
        (true, true) => return AnswerScore { f1: 1.0, precision: 1.0, recall: 1.0 },
        (true, false) | (false, true) => return AnswerScore { f1: 0.0, precision: 0.0, recall: 0.0 },
        _ => {}
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for t in &gold {
        *counts.entry(t.as_str()).or_default() += 1;
    }
    let mut common = 0usize;
    for t in &pred {
        if let Some(c) = counts.get_mut(t.as_str()) {
            if *c > 0 {
                *c -= 1;
                common += 1;
            }
        }
    }
    if common == 0 {
        return AnswerScore { f1: 0.0, precision: 0.0, recall: 0.0 };
    }
    let precision = common as f64 / pred.len() as f64;
    let recall = common as f64 / gold.len() as f64;
    AnswerScore { f1: 2.0 * precision * recall / (precision + recall), precision, recall }
}

pub fn answer_em(prediction: &str, gold: &str) -> u8 {
    u8::from(crate::corpus::normalize_answer(prediction) == crate::corpus::normalize_answer(gold))
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum RewardError {
    #[error("distributions have different support sizes ({0} vs {1})")]
    SupportMismatch(usize, usize),
    #[error("reference distribution is zero at index {0} where p is positive")]
    ZeroReference(usize),
}

/// KL(p ‖ q) in nats.
pub fn kl_categorical(p: &[f64], q: &[f64]) -> Result<f64, RewardError> {
    if p.len() != q.len() {
        return Err(RewardError::SupportMismatch(p.len(), q.len()));
    }
    let mut total = 0.0;
    for (i, (&pi, &qi)) in p.iter().zip(q).enumerate() {
        if pi <= 0.0 {
            continue;
        }
        if qi <= 0.0 {
            return Err(RewardError::ZeroReference(i));
        }
        total += pi * (pi / qi).ln();
    }
    Ok(total.max(0.0))
}

/// Mean over buckets of KL(current_b ‖ initial_b).
pub fn policy_kl(current: &PolicyParams, initial: &PolicyParams) -> Result<f64, RewardError> {
    if current.num_buckets() != initial.num_buckets() {
        return Err(RewardError::SupportMismatch(current.num_buckets(), initial.num_buckets()));
    }
    let mut total = 0.0;
    for b in 0..current.num_buckets() {
        total += kl_categorical(&current.probs(b), &initial.probs(b))?;
    }
    Ok(total / current.num_buckets() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    /// γ^i · (1 − d_i) for i = 1..n.
    pub turn_terms: Vec<f64>,
    pub f1_term: f64,
    pub kl_term: f64,
    pub alpha: f64,
    pub total: f64,
}

/// R = Σ_i γ^i (1 − d_i) + F1 − α·KL.
pub fn compose_reward(distances: &[f64], gamma: f64, f1: f64, kl: f64, alpha: f64) -> RewardBreakdown {
    let mut weight = 1.0;
    let turn_terms: Vec<f64> = distances
        .iter()
        .map(|d| {
            weight *= gamma;
            weight * (1.0 - d)
        })
        .collect();
    let total = turn_terms.iter().sum::<f64>() + f1 - alpha * kl;
    RewardBreakdown { turn_terms, f1_term: f1, kl_term: kl, alpha, total }
}

pub fn clip_ratio(ratio: f64, epsilon: f64) -> f64 {
    ratio.clamp(1.0 - epsilon, 1.0 + epsilon)
}

/// min(r·A, clip(r)·A).
pub fn clipped_term(ratio: f64, advantage: f64, epsilon: f64) -> f64 {
    (ratio * advantage).min(clip_ratio(ratio, epsilon) * advantage)
}

// ------------------------------------------------------------------ trainer

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainerConfig {
    pub alpha: f64,
    pub clip_epsilon: f64,
    pub learning_rate: f64,
    pub batch_episodes: usize,
    pub iterations: usize,
    /// Full-batch gradient steps per collected batch.
    pub update_steps: usize,
    pub seed: u64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            alpha: DEFAULT_ALPHA,
            clip_epsilon: DEFAULT_CLIP_EPSILON,
            learning_rate: DEFAULT_LEARNING_RATE,
            batch_episodes: DEFAULT_BATCH_EPISODES,
            iterations: DEFAULT_ITERATIONS,
            update_steps: DEFAULT_UPDATE_STEPS,
            seed: 0,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.clip_epsilon > 0.0 && self.clip_epsilon < 1.0) {
            return Err(TrainError::Config("clip_epsilon must lie in (0, 1)".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(TrainError::Config("learning_rate must be positive".into()));
        }
        if self.alpha < 0.0 {
            return Err(TrainError::Config("alpha must be non-negative".into()));
        }
        if self.batch_episodes == 0 || self.update_steps == 0 {
            return Err(TrainError::Config("batch_episodes and update_steps must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid trainer config: {0}")]
    Config(String),
    #[error("policy: {0}")]
    Policy(#[from] crate::reasoner::ReasonerError),
    #[error("empty training set")]
    NoSamples,
    #[error("training episodes require train mode")]
    WrongMode,
    #[error("every episode of iteration {0} failed; first error: {1}")]
    BatchFailed(usize, String),
    #[error("non-finite gradient at iteration {iteration} (bucket {bucket}, action {action})")]
    NonFinite { iteration: usize, bucket: usize, action: usize },
    #[error("kl: {0}")]
    Kl(#[from] RewardError),
}

/// Everything an episode needs besides the questioner.
#[derive(Clone, Copy)]
pub struct ToyWorld<'a> {
    pub store: &'a CorpusStore,
    pub index: &'a VectorIndex,
    pub provider: &'a dyn EmbeddingProvider,
    pub refiner: &'a Refiner,
    pub answerer: &'a Arc<dyn Answerer>,
}

/// One collected episode reduced to what the update needs.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    /// (bucket, action, log π_old(action | bucket)).
    pub steps: Vec<(usize, usize, f64)>,
    pub reward: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub iteration: usize,
    pub mean_reward: f64,
    pub mean_d: f64,
    pub mean_f1: f64,
    pub kl: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: PolicyParams,
    pub curve: Vec<CurvePoint>,
}

/// Mean over the batch of Σ_t min(r_t A, clip(r_t) A), minus α·KL(θ ‖ θ_0).
pub fn surrogate_objective(
    params: &PolicyParams,
    initial: &PolicyParams,
    batch: &[Trajectory],
    epsilon: f64,
    alpha: f64,
) -> Result<f64, RewardError> {
    let adv = advantages(batch);
    let mut total = 0.0;
    for (traj, a) in batch.iter().zip(&adv) {
        for &(b, act, old_lp) in &traj.steps {
            let ratio = (params.log_prob(b, act) - old_lp).exp();
            total += clipped_term(ratio, *a, epsilon);
        }
    }
    Ok(total / batch.len().max(1) as f64 - alpha * policy_kl(params, initial)?)
}

/// Analytic gradient of [`surrogate_objective`] with respect to the logits.
pub fn surrogate_gradient(
    params: &PolicyParams,
    initial: &PolicyParams,
    batch: &[Trajectory],
    epsilon: f64,
    alpha: f64,
) -> Vec<Vec<f64>> {
    let nb = params.num_buckets();
    let na = params.num_actions();
    let probs: Vec<Vec<f64>> = (0..nb).map(|b| params.probs(b)).collect();
    let mut grad = vec![vec![0.0; na]; nb];
    let adv = advantages(batch);
    let scale = 1.0 / batch.len().max(1) as f64;
    for (traj, &a) in batch.iter().zip(&adv) {
        for &(b, act, old_lp) in &traj.steps {
            let ratio = (params.log_prob(b, act) - old_lp).exp();
            // the clipped branch is flat in θ
            let unclipped_active = ratio * a <= clip_ratio(ratio, epsilon) * a;
            if !unclipped_active {
                continue;
            }
            for (k, g) in grad[b].iter_mut().enumerate() {
                let score = f64::from(u8::from(k == act)) - probs[b][k];
                *g += scale * a * ratio * score;
            }
        }
    }
    if alpha > 0.0 {
        for b in 0..nb {
            let q = initial.probs(b);
            let p = &probs[b];
            let kl: f64 = p.iter().zip(&q).map(|(pi, qi)| if *pi > 0.0 { pi * (pi / qi).ln() } else { 0.0 }).sum();
            for k in 0..na {
                let d_kl = p[k] * ((p[k] / q[k]).ln() - kl);
                grad[b][k] -= alpha * d_kl / nb as f64;
            }
        }
    }
    grad
}

fn advantages(batch: &[Trajectory]) -> Vec<f64> {
    if batch.is_empty() {
        return Vec::new();
    }
    let mean = batch.iter().map(|t| t.reward).sum::<f64>() / batch.len() as f64;
    batch.iter().map(|t| t.reward - mean).collect()
}

fn policy_backends(params: &PolicyParams, world: &ToyWorld<'_>, greedy: bool) -> Result<Backends, TrainError> {
    let mut policy = TemplatePolicy::new(params.clone())?;
    if greedy {
        policy = policy.greedy();
    }
    Ok(Backends { questioner: Arc::new(policy), answerer: world.answerer.clone() })
}

/// Runs one episode per `(sample index, seed)` job with `params` driving the questioner.
pub fn collect_episodes(
    params: &PolicyParams,
    world: &ToyWorld<'_>,
    samples: &[EpisodeSample],
    episode: &EpisodeConfig,
    jobs: &[(usize, u64)],
    greedy: bool,
) -> Result<Vec<EpisodeResult>, TrainError> {
    let backends = policy_backends(params, world, greedy)?;
    let pipe = Pipeline {
        store: world.store,
        index: world.index,
        provider: world.provider,
        refiner: world.refiner,
        backends: &backends,
    };
    Ok(jobs
        .par_iter()
        .map(|&(i, seed)| {
            let cfg = EpisodeConfig { seed, ..episode.clone() };
            let sample = &samples[i];
            run_episode(sample, pipe, &cfg)
                .unwrap_or_else(|e| EpisodeResult::failed(&sample.id, &sample.question, cfg.mode, e.to_string()))
        })
        .collect())
}

pub fn train_toy_questioner(
    samples: &[EpisodeSample],
    world: &ToyWorld<'_>,
    config: &TrainerConfig,
    episode: &EpisodeConfig,
    initial: &PolicyParams,
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    initial.validate()?;
    if samples.is_empty() {
        return Err(TrainError::NoSamples);
    }
    if episode.mode != Mode::Train {
        return Err(TrainError::WrongMode);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params = initial.clone();
    let mut curve = Vec::with_capacity(config.iterations);

    for iteration in 0..config.iterations {
        let kl = policy_kl(&params, initial)?;
        let jobs: Vec<(usize, u64)> =
            (0..config.batch_episodes).map(|_| (rng.random_range(0..samples.len()), rng.random::<u64>())).collect();
        let results = collect_episodes(&params, world, samples, episode, &jobs, false)?;

        let mut batch = Vec::with_capacity(results.len());
        let (mut sum_d, mut sum_f1) = (0.0, 0.0);
        let mut first_error = None;
        for r in &results {
            let (Some(reward), Some(tracker), None) = (&r.reward, &r.tracker, &r.error) else {
                first_error.get_or_insert_with(|| r.error.clone().unwrap_or_default());
                continue;
            };
            let breakdown = compose_reward(&tracker.distances, episode.tracker.gamma, reward.f1_term, kl, config.alpha);
            sum_d += tracker.accumulated;
            sum_f1 += breakdown.f1_term;
            batch.push(Trajectory {
                steps: r.actions.iter().map(|a| (a.bucket, a.action, a.log_prob)).collect(),
                reward: breakdown.total,
            });
        }
        if batch.is_empty() {
            return Err(TrainError::BatchFailed(iteration, first_error.unwrap_or_default()));
        }
        if let Some(e) = first_error {
            log::warn!("iteration {iteration}: {} episodes failed ({e})", results.len() - batch.len());
        }
        let n = batch.len() as f64;
        curve.push(CurvePoint {
            iteration,
            mean_reward: batch.iter().map(|t| t.reward).sum::<f64>() / n,
            mean_d: sum_d / n,
            mean_f1: sum_f1 / n,
            kl,
        });

        for _ in 0..config.update_steps {
            let grad = surrogate_gradient(&params, initial, &batch, config.clip_epsilon, config.alpha);
            for (b, row) in grad.iter().enumerate() {
                for (a, g) in row.iter().enumerate() {
                    if !g.is_finite() {
                        return Err(TrainError::NonFinite { iteration, bucket: b, action: a });
                    }
                    params.logits[b][a] += config.learning_rate * g;
                }
            }
        }
    }
    Ok(TrainOutcome { params, curve })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolicyEval {
    pub mean_reward: f64,
    pub mean_f1: f64,
    pub passage_em: f64,
    pub episodes: usize,
}

/// Runs every sample once (seed `seed + index`) and averages reward, answer
/// F1 and passage EM. The reward's KL term is measured against `initial`.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_policy(
    params: &PolicyParams,
    initial: &PolicyParams,
    world: &ToyWorld<'_>,
    samples: &[EpisodeSample],
    episode: &EpisodeConfig,
    alpha: f64,
    greedy: bool,
    seed: u64,
) -> Result<PolicyEval, TrainError> {
    let kl = policy_kl(params, initial)?;
    let jobs: Vec<(usize, u64)> = (0..samples.len()).map(|i| (i, seed.wrapping_add(i as u64))).collect();
    let results = collect_episodes(params, world, samples, episode, &jobs, greedy)?;
    let n = results.len().max(1) as f64;
    let (mut reward, mut f1, mut pem) = (0.0, 0.0, 0.0);
    for (r, s) in results.iter().zip(samples) {
        let score = answer_f1(r.prediction(), &s.answer).f1;
        let distances = r.tracker.as_ref().map(|t| t.distances.as_slice()).unwrap_or_default();
        reward += compose_reward(distances, episode.tracker.gamma, score, kl, alpha).total;
        f1 += score;
        pem += f64::from(crate::eval::passage_em(r.retrieved_ids.iter().map(String::as_str), &s.gold_support));
    }
    Ok(PolicyEval { mean_reward: reward / n, mean_f1: f1 / n, passage_em: pem / n, episodes: results.len() })
}

pub fn write_curve_csv(curve: &[CurvePoint], path: &Path) -> std::io::Result<()> {
    let mut out = String::from("iteration,mean_reward,mean_d,mean_f1,kl\n");
    for p in curve {
        out.push_str(&format!("{},{},{},{},{}\n", p.iteration, p.mean_reward, p.mean_d, p.mean_f1, p.kl));
    }
    std::fs::write(path, out)
}

/// Probability of each bucket's most likely template.
pub fn greedy_profile(params: &PolicyParams) -> Vec<(usize, f64)> {
    (0..params.num_buckets())
        .map(|b| {
            let p = softmax(&params.logits[b]);
            p.iter().enumerate().fold((0, f64::MIN), |best, (i, &x)| if x > best.1 { (i, x) } else { best })
        })
        .collect()
}
