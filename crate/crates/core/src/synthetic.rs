//! Template-generated event-pair corpus whose label is carried by a single
//! connective ("cue") token and never by the event words.
//!
//! Each sentence is `fillers E1 fillers [cue] fillers E2 fillers`. A causal
//! cue marks a positive pair, a neutral cue a negative one. With probability
//! `cue_in_span_rate` the cue is folded into one of the event spans instead
//! (`[storm caused]` or `[caused flood]`), so masking that event removes the
//! cue from the cloze view. With probability `topic_cue_rate` the cue is a
//! topic-specific word, which makes topic-disjoint splits harder than
//! shuffled ones.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Document, SentenceExample, Span};

pub const EVENT_WORDS: [&str; 24] = [
    "storm", "flood", "fire", "blast", "strike", "quake", "crash", "riot", "outage", "collapse",
    "arrest", "protest", "shooting", "evacuation", "blackout", "surge", "drought", "spill", "attack",
    "closure", "layoff", "recall", "delay", "injury",
];

pub const CAUSAL_CUES: [&str; 4] = ["caused", "triggered", "sparked", "produced"];
pub const NEUTRAL_CUES: [&str; 4] = ["preceded", "accompanied", "resembled", "matched"];
pub const SHARED_FILLERS: [&str; 8] = ["the", "a", "of", "in", "on", "was", "reported", "yesterday"];

const TOPIC_FILLERS: usize = 8;

pub fn topic_id(t: usize) -> String {
    format!("topic{t:02}")
}

pub fn topic_causal_cue(t: usize) -> String {
    format!("t{t:02}_cause")
}

pub fn topic_neutral_cue(t: usize) -> String {
    format!("t{t:02}_link")
}

/// True for any token that signals causality in generated sentences.
pub fn is_causal_cue(token: &str) -> bool {
    CAUSAL_CUES.contains(&token) || (token.starts_with('t') && token.ends_with("_cause"))
}

pub fn is_neutral_cue(token: &str) -> bool {
    NEUTRAL_CUES.contains(&token) || (token.starts_with('t') && token.ends_with("_link"))
}

pub fn is_cue(token: &str) -> bool {
    is_causal_cue(token) || is_neutral_cue(token)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_docs: usize,
    pub n_topics: usize,
    pub pairs_per_doc: usize,
    pub seed: u64,
    pub positive_rate: f64,
    pub cue_in_span_rate: f64,
    pub topic_cue_rate: f64,
}

impl SynthConfig {
    /// Cue corpus: shared cues only.
    pub fn cue(n_docs: usize, n_topics: usize, pairs_per_doc: usize, seed: u64) -> Self {
        Self {
            n_docs,
            n_topics,
            pairs_per_doc,
            seed,
            positive_rate: 0.25,
            cue_in_span_rate: 0.5,
            topic_cue_rate: 0.0,
        }
    }

    /// Topic-shifted corpus: half the cues are topic-specific.
    pub fn topic_shifted(n_docs: usize, n_topics: usize, pairs_per_doc: usize, seed: u64) -> Self {
        Self {
            topic_cue_rate: 0.5,
            ..Self::cue(n_docs, n_topics, pairs_per_doc, seed)
        }
    }
}

fn fillers<R: Rng>(rng: &mut R, topic: usize, max: usize, out: &mut Vec<String>) {
    for _ in 0..rng.gen_range(0..=max) {
        if rng.gen_bool(0.5) {
            out.push(SHARED_FILLERS.choose(rng).unwrap().to_string());
        } else {
            out.push(format!("t{topic:02}_w{}", rng.gen_range(0..TOPIC_FILLERS)));
        }
    }
}

fn sentence<R: Rng>(rng: &mut R, cfg: &SynthConfig, topic: usize) -> SentenceExample {
    let label = rng.gen_bool(cfg.positive_rate);
    let topical = rng.gen_bool(cfg.topic_cue_rate);
    let cue = match (label, topical) {
        (true, true) => topic_causal_cue(topic),
        (false, true) => topic_neutral_cue(topic),
        (true, false) => CAUSAL_CUES.choose(rng).unwrap().to_string(),
        (false, false) => NEUTRAL_CUES.choose(rng).unwrap().to_string(),
    };
    let mut events = EVENT_WORDS.choose_multiple(rng, 2);
    let (ev1, ev2) = (events.next().unwrap().to_string(), events.next().unwrap().to_string());
    let in_span = rng.gen_bool(cfg.cue_in_span_rate);
    let carrier_first = rng.gen_bool(0.5);

    let mut tokens = Vec::new();
    fillers(rng, topic, 2, &mut tokens);
    let e1_start = tokens.len();
    tokens.push(ev1);
    if in_span && carrier_first {
        tokens.push(cue.clone());
    }
    let e1 = Span::new(e1_start, tokens.len());
    fillers(rng, topic, 1, &mut tokens);
    if !in_span {
        tokens.push(cue.clone());
    }
    fillers(rng, topic, 1, &mut tokens);
    let e2_start = tokens.len();
    if in_span && !carrier_first {
        tokens.push(cue);
    }
    tokens.push(ev2);
    let e2 = Span::new(e2_start, tokens.len());
    fillers(rng, topic, 2, &mut tokens);

    SentenceExample {
        tokens,
        e1,
        e2,
        label,
        order_swapped: false,
    }
}

/// Documents are dealt to topics round-robin, so every topic is populated
/// once `n_docs >= n_topics`.
pub fn make_synthetic_corpus(cfg: &SynthConfig) -> Vec<Document> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let topics = cfg.n_topics.max(1);
    (0..cfg.n_docs)
        .map(|i| {
            let topic = i % topics;
            let examples = (0..cfg.pairs_per_doc).map(|_| sentence(&mut rng, cfg, topic)).collect();
            Document {
                doc_id: format!("doc{i:04}"),
                topic_id: topic_id(topic),
                examples,
            }
        })
        .collect()
}

/// Predicts causal iff a causal cue appears anywhere in the sentence.
pub fn cue_oracle(ex: &SentenceExample) -> bool {
    ex.tokens.iter().any(|t| is_causal_cue(t))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluation::score;

    #[test]
    fn deterministic_under_seed() {
        let a = make_synthetic_corpus(&SynthConfig::cue(50, 4, 2, 7));
        let b = make_synthetic_corpus(&SynthConfig::cue(50, 4, 2, 7));
        let c = make_synthetic_corpus(&SynthConfig::cue(50, 4, 2, 8));
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn size_and_class_balance() {
        let docs = make_synthetic_corpus(&SynthConfig::cue(200, 4, 1, 11));
        let n: usize = docs.iter().map(|d| d.examples.len()).sum();
        assert_eq!(n, 200);
        let pos = docs.iter().flat_map(|d| &d.examples).filter(|e| e.label).count();
        // binomial(200, 0.25): mean 50, 3σ ≈ 18.4
        assert!((32..=68).contains(&pos), "{pos}");
    }

    #[test]
    fn every_example_validates_and_oracle_is_perfect() {
        for cfg in [SynthConfig::cue(120, 5, 2, 3), SynthConfig::topic_shifted(120, 5, 2, 3)] {
            let docs = make_synthetic_corpus(&cfg);
            let mut preds = Vec::new();
            let mut golds = Vec::new();
            for ex in docs.iter().flat_map(|d| &d.examples) {
                assert_eq!(ex.clone().normalized().unwrap(), *ex);
                assert_eq!(ex.tokens.iter().filter(|t| is_cue(t)).count(), 1);
                preds.push(cue_oracle(ex));
                golds.push(ex.label);
            }
            assert_eq!(score(&preds, &golds).unwrap().f1(), 1.0);
        }
    }

    #[test]
    fn event_words_carry_no_label() {
        let docs = make_synthetic_corpus(&SynthConfig::cue(400, 4, 1, 5));
        for ex in docs.iter().flat_map(|d| &d.examples) {
            for span in [ex.e1, ex.e2] {
                let words: Vec<&String> = ex.tokens[span.start..span.end].iter().filter(|t| !is_cue(t)).collect();
                assert_eq!(words.len(), 1);
                assert!(EVENT_WORDS.contains(&words[0].as_str()));
            }
        }
    }

    #[test]
    fn topic_cues_only_in_shifted_corpus() {
        let plain = make_synthetic_corpus(&SynthConfig::cue(100, 4, 1, 2));
        assert!(plain
            .iter()
            .flat_map(|d| &d.examples)
            .all(|e| !e.tokens.iter().any(|t| t.ends_with("_cause") || t.ends_with("_link"))));
        let shifted = make_synthetic_corpus(&SynthConfig::topic_shifted(100, 4, 1, 2));
        assert!(shifted
            .iter()
            .flat_map(|d| &d.examples)
            .any(|e| e.tokens.iter().any(|t| t.ends_with("_cause") || t.ends_with("_link"))));
    }
}
