//! Run-level metrics and paired significance testing.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::corpus::EpisodeSample;
use crate::episode::EpisodeResult;
use crate::reward::{answer_em, answer_f1};

/// Discordant-pair count above which the chi-square form replaces the exact test.
pub const DEFAULT_EXACT_LIMIT: u64 = 100;
pub const SIGNIFICANCE_LEVEL: f64 = 0.05;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum EvalError {
    #[error("results and samples do not align: {0}")]
    Misaligned(String),
    #[error("paired runs have different lengths ({0} vs {1})")]
    LengthMismatch(usize, usize),
}

/// 1 iff every gold id appears among the retrieved ids.
pub fn passage_em<'a>(retrieved: impl IntoIterator<Item = &'a str>, gold: &[String]) -> u8 {
    let seen: BTreeSet<&str> = retrieved.into_iter().collect();
    u8::from(gold.iter().all(|g| seen.contains(g.as_str())))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleScore {
    pub id: String,
    pub em: u8,
    pub f1: f64,
    pub passage_em: u8,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub samples: Vec<SampleScore>,
    pub em: f64,
    pub f1: f64,
    pub passage_em: f64,
    pub failed_episodes: usize,
    #[serde(default)]
    pub fingerprint: Option<String>,
}

impl RunReport {
    pub fn em_bits(&self) -> Vec<u8> {
        self.samples.iter().map(|s| s.em).collect()
    }

    pub fn table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<12} {:>8}", "metric", "value");
        let _ = writeln!(out, "{:<12} {:>8.1}", "EM", self.em);
        let _ = writeln!(out, "{:<12} {:>8.1}", "F1", self.f1);
        let _ = writeln!(out, "{:<12} {:>8.1}", "Passage EM", self.passage_em);
        let _ = writeln!(out, "{:<12} {:>8}", "samples", self.samples.len());
        if self.failed_episodes > 0 {
            let _ = writeln!(out, "{:<12} {:>8}", "failed", self.failed_episodes);
        }
        out
    }
}

/// Scores each result against the sample with the same id. A failed episode
/// scores whatever partial answer it produced.
pub fn evaluate_run(results: &[EpisodeResult], samples: &[EpisodeSample]) -> Result<RunReport, EvalError> {
    let by_id: HashMap<&str, &EpisodeSample> = samples.iter().map(|s| (s.id.as_str(), s)).collect();
    let missing: Vec<&str> =
        results.iter().map(|r| r.sample_id.as_str()).filter(|id| !by_id.contains_key(id)).collect();
    if !missing.is_empty() {
        return Err(EvalError::Misaligned(format!("no sample for result ids {}", missing.join(", "))));
    }
    if results.len() != samples.len() {
        let have: BTreeSet<&str> = results.iter().map(|r| r.sample_id.as_str()).collect();
        let absent: Vec<&str> = samples.iter().map(|s| s.id.as_str()).filter(|id| !have.contains(id)).collect();
        return Err(EvalError::Misaligned(format!(
            "{} results for {} samples; unanswered: {}",
            results.len(),
            samples.len(),
            absent.join(", ")
        )));
    }

    let scores: Vec<SampleScore> = results
        .iter()
        .map(|r| {
            let s = by_id[r.sample_id.as_str()];
            let pred = r.prediction();
            SampleScore {
                id: r.sample_id.clone(),
                em: answer_em(pred, &s.answer),
                f1: answer_f1(pred, &s.answer).f1,
                passage_em: if s.gold_support.is_empty() {
                    0
                } else {
                    passage_em(r.retrieved_ids.iter().map(String::as_str), &s.gold_support)
                },
                error: r.error.clone(),
            }
        })
        .collect();
    let n = scores.len().max(1) as f64;
    let mean = |f: &dyn Fn(&SampleScore) -> f64| 100.0 * scores.iter().map(f).sum::<f64>() / n;
    Ok(RunReport {
        em: mean(&|s| f64::from(s.em)),
        f1: mean(&|s| s.f1),
        passage_em: mean(&|s| f64::from(s.passage_em)),
        failed_episodes: scores.iter().filter(|s| s.error.is_some()).count(),
        samples: scores,
        fingerprint: None,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum McNemarMethod {
    ExactBinomial,
    ChiSquareCorrected,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McNemarResult {
    /// A correct, B wrong.
    pub b: u64,
    /// A wrong, B correct.
    pub c: u64,
    pub p_value: f64,
    pub significant: bool,
    pub method: McNemarMethod,
}

/// Two-sided exact binomial p-value, 2·Σ_{k≤min(b,c)} C(n,k)·0.5^n, capped at 1.
pub fn exact_binomial_p(b: u64, c: u64) -> f64 {
    let n = b + c;
    if n == 0 {
        return 1.0;
    }
    // log-space terms keep large n finite
    let ln_half_n = n as f64 * 0.5f64.ln();
    let mut ln_choose = 0.0f64;
    let mut total = 0.0;
    for k in 0..=b.min(c) {
        if k > 0 {
            ln_choose += ((n - k + 1) as f64).ln() - (k as f64).ln();
        }
        total += (ln_choose + ln_half_n).exp();
    }
    (2.0 * total).min(1.0)
}

/// Continuity-corrected chi-square with one degree of freedom.
pub fn chi_square_p(b: u64, c: u64) -> f64 {
    let n = (b + c) as f64;
    if n == 0.0 {
        return 1.0;
    }
    let diff = (b as f64 - c as f64).abs() - 1.0;
    let stat = diff.max(0.0).powi(2) / n;
    erfc((stat / 2.0).sqrt()).min(1.0)
}

pub fn mcnemar_test(run_a: &[u8], run_b: &[u8], exact_limit: u64) -> Result<McNemarResult, EvalError> {
    if run_a.len() != run_b.len() {
        return Err(EvalError::LengthMismatch(run_a.len(), run_b.len()));
    }
    let (mut b, mut c) = (0u64, 0u64);
    for (&x, &y) in run_a.iter().zip(run_b) {
        match (x != 0, y != 0) {
            (true, false) => b += 1,
            (false, true) => c += 1,
            _ => {}
        }
    }
    let (p_value, method) = if b + c > exact_limit {
        (chi_square_p(b, c), McNemarMethod::ChiSquareCorrected)
    } else {
        (exact_binomial_p(b, c), McNemarMethod::ExactBinomial)
    };
    Ok(McNemarResult { b, c, p_value, significant: p_value < SIGNIFICANCE_LEVEL, method })
}
