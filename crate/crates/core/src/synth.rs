//! Generated corpora: a two-hop bridge task, its hard-negative variant and a
//! large topical corpus for index benchmarks.

use std::collections::HashSet;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{CorpusStore, EpisodeSample, Passage};
use crate::reasoner::{QueryTemplate, Script};

const ONSETS: &[&str] =
    &["b", "br", "d", "dr", "f", "g", "gr", "k", "kl", "m", "n", "p", "qu", "r", "s", "st", "t", "tr", "v", "z"];
const VOWELS: &[&str] = &["a", "e", "i", "o", "u", "ei", "ou"];
const CODAS: &[&str] = &["", "", "l", "n", "r", "x", "k", "th"];

const TAILS: &[&str] =
    &["on the old trade road", "along the northern canal", "beyond the salt marsh", "past the high moor"];

/// Unique pseudo-words that cannot collide with English function words.
struct WordForge {
    rng: ChaCha8Rng,
    used: HashSet<String>,
}

impl WordForge {
    fn new(seed: u64) -> Self {
        Self { rng: ChaCha8Rng::seed_from_u64(seed), used: HashSet::new() }
    }

    fn word(&mut self, syllables: usize) -> String {
        loop {
            let mut w = String::new();
            for _ in 0..syllables {
                w.push_str(ONSETS.choose(&mut self.rng).unwrap());
                w.push_str(VOWELS.choose(&mut self.rng).unwrap());
            }
            w.push_str(CODAS.choose(&mut self.rng).unwrap());
            if w.len() >= 4 && self.used.insert(w.clone()) {
                return w;
            }
        }
    }

    fn name(&mut self, syllables: usize) -> String {
        capitalize(&self.word(syllables))
    }
}

fn capitalize(w: &str) -> String {
    let mut c = w.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TwoHopSpec {
    pub samples: usize,
    /// Passages that echo the question wording but hold no evidence.
    pub distractors: usize,
    /// Per-sample passages stuffed with the first-hop entity's first word.
    pub hard_negatives: usize,
    pub seed: u64,
}

impl Default for TwoHopSpec {
    fn default() -> Self {
        Self { samples: 50, distractors: 100, hard_negatives: 0, seed: 7 }
    }
}

/// Bridge questions "E1 is next to which village ...?" whose answer E2 is
/// named only inside E1's passage. The first hop is found by querying E1, the
/// second by querying the entity mentioned in the first hop's passage.
pub fn two_hop_task(spec: &TwoHopSpec) -> CorpusStore {
    let mut forge = WordForge::new(spec.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5eed);
    let mut passages = Vec::new();
    let mut samples = Vec::new();

    for i in 0..spec.samples {
        let e1 = format!("{} {}", forge.name(2), forge.name(2));
        let e2 = forge.name(2);
        let tail = TAILS[i % TAILS.len()];
        let hop1 = format!("h1-{i:03}");
        let hop2 = format!("h2-{i:03}");
        passages.push(Passage {
            id: hop1.clone(),
            title: e1.clone(),
            text: format!("{e1} lies beside {e2}, a hamlet famed for {}.", forge.word(2)),
        });
        passages.push(Passage {
            id: hop2.clone(),
            title: e2.clone(),
            text: format!("{e2} hamlet: {e2} mills grain for {e2} farms."),
        });
        let first = e1.split(' ').next().unwrap().to_lowercase();
        for j in 0..spec.hard_negatives {
            let filler = forge.word(1);
            passages.push(Passage {
                id: format!("hn-{i:03}-{j}"),
                title: capitalize(&forge.word(1)[..2]),
                text: format!("{first} {first} {first} {first} {filler}"),
            });
        }
        samples.push(EpisodeSample {
            id: format!("toy-{i:03}"),
            question: format!("{e1} is next to which village {tail}?"),
            gold_support: vec![hop1, hop2],
            answer: e2,
        });
    }
    for k in 0..spec.distractors {
        let tail = TAILS[rng.random_range(0..TAILS.len())];
        let extra = forge.word(2);
        passages.push(Passage {
            id: format!("dx-{k:03}"),
            title: format!("Route Ledger Entry {k}"),
            text: format!("is next to which village {tail} {extra}"),
        });
    }
    CorpusStore::from_parts(passages, samples).expect("generated corpus is consistent")
}

/// The template pair that solves every [`two_hop_task`] sample.
pub const ORACLE_TEMPLATES: [QueryTemplate; 2] = [QueryTemplate::QuestionEntity, QueryTemplate::LastEntity];

/// Oracle scripts for a two-hop store: query E1, then E2.
pub fn oracle_scripts(store: &CorpusStore) -> Vec<Script> {
    store
        .samples()
        .iter()
        .map(|s| {
            let hop1 = store.get(&s.gold_support[0]).expect("gold present");
            let hop2 = store.get(&s.gold_support[1]).expect("gold present");
            Script {
                question: s.question.clone(),
                queries: vec![hop1.title.clone(), hop2.title.clone()],
                answer: s.answer.clone(),
            }
        })
        .collect()
}

/// Topic-clustered passages plus queries drawn from the same topics.
pub fn topical_corpus(n: usize, topics: usize, queries: usize, seed: u64) -> (CorpusStore, Vec<String>) {
    let mut forge = WordForge::new(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x70b1c);
    let vocab: Vec<Vec<String>> = (0..topics.max(1)).map(|_| (0..40).map(|_| forge.word(2)).collect()).collect();
    let shared: Vec<String> = (0..200).map(|_| forge.word(3)).collect();
    let draw = |rng: &mut ChaCha8Rng, topic: usize, own: usize, common: usize| {
        let mut words: Vec<&str> = (0..own).map(|_| vocab[topic].choose(rng).unwrap().as_str()).collect();
        words.extend((0..common).map(|_| shared.choose(rng).unwrap().as_str()));
        words.join(" ")
    };
    let passages = (0..n)
        .map(|i| {
            let topic = rng.random_range(0..vocab.len());
            Passage { id: format!("t{i:06}"), title: format!("Topic {topic}"), text: draw(&mut rng, topic, 12, 4) }
        })
        .collect();
    let qs = (0..queries)
        .map(|_| {
            let topic = rng.random_range(0..vocab.len());
            draw(&mut rng, topic, 4, 1)
        })
        .collect();
    (CorpusStore::from_parts(passages, Vec::new()).expect("unique ids"), qs)
}
