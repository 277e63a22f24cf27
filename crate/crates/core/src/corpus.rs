//! Event-pair corpora: JSON Lines ingestion, vocabulary, fold plans and
//! negative sampling.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::CorpusError;

/// Half-open token range `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "[usize; 2]", into = "[usize; 2]")]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        Self { start, end }
    }

    pub fn len(&self) -> usize {
        self.end.saturating_sub(self.start)
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    pub fn contains(&self, i: usize) -> bool {
        (self.start..self.end).contains(&i)
    }

    pub fn overlaps(&self, other: &Span) -> bool {
        self.start < other.end && other.start < self.end
    }
}

impl From<[usize; 2]> for Span {
    fn from([start, end]: [usize; 2]) -> Self {
        Self { start, end }
    }
}

impl From<Span> for [usize; 2] {
    fn from(s: Span) -> Self {
        [s.start, s.end]
    }
}

/// One intra-sentence event pair with its gold label.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentenceExample {
    pub tokens: Vec<String>,
    pub e1: Span,
    pub e2: Span,
    pub label: bool,
    /// Set when ingestion swapped the events to put `e1` first.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub order_swapped: bool,
}

impl SentenceExample {
    /// Checks span bounds and disjointness, then orders the events textually.
    pub fn normalized(mut self) -> Result<Self, String> {
        let n = self.tokens.len();
        for (name, s) in [("e1", self.e1), ("e2", self.e2)] {
            if s.is_empty() {
                return Err(format!("{name} span {:?} is empty", <[usize; 2]>::from(s)));
            }
            if s.end > n {
                return Err(format!(
                    "{name} span {:?} out of range for {n} tokens",
                    <[usize; 2]>::from(s)
                ));
            }
        }
        if self.e1.overlaps(&self.e2) {
            return Err("event spans overlap".into());
        }
        if self.e2.start < self.e1.start {
            std::mem::swap(&mut self.e1, &mut self.e2);
            self.order_swapped = !self.order_swapped;
        }
        Ok(self)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub doc_id: String,
    pub topic_id: String,
    pub examples: Vec<SentenceExample>,
}

#[derive(Serialize, Deserialize)]
struct Line {
    doc_id: String,
    topic: String,
    tokens: Vec<String>,
    e1: Span,
    e2: Span,
    label: bool,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    order_swapped: bool,
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<Vec<Document>, CorpusError> {
    let file = std::fs::File::open(path)?;
    read_corpus(std::io::BufReader::new(file))
}

/// Parses JSON Lines; lines sharing a `doc_id` are grouped into one document
/// in order of first appearance. Blank lines are skipped.
pub fn read_corpus<R: BufRead>(reader: R) -> Result<Vec<Document>, CorpusError> {
    let mut docs: Vec<Document> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Line = serde_json::from_str(&line).map_err(|source| CorpusError::Parse {
            line: i + 1,
            source,
        })?;
        let example = SentenceExample {
            tokens: rec.tokens,
            e1: rec.e1,
            e2: rec.e2,
            label: rec.label,
            order_swapped: rec.order_swapped,
        }
        .normalized()
        .map_err(|reason| CorpusError::Validation {
            doc_id: rec.doc_id.clone(),
            reason: format!("line {}: {reason}", i + 1),
        })?;
        match index.get(&rec.doc_id) {
            Some(&d) => {
                if docs[d].topic_id != rec.topic {
                    return Err(CorpusError::Validation {
                        doc_id: rec.doc_id,
                        reason: format!("line {}: topic changes within document", i + 1),
                    });
                }
                docs[d].examples.push(example);
            }
            None => {
                index.insert(rec.doc_id.clone(), docs.len());
                docs.push(Document {
                    doc_id: rec.doc_id,
                    topic_id: rec.topic,
                    examples: vec![example],
                });
            }
        }
    }
    Ok(docs)
}

/// Writes one JSON line per example.
pub fn write_corpus<W: Write>(docs: &[Document], mut out: W) -> std::io::Result<()> {
    for doc in docs {
        for ex in &doc.examples {
            let line = Line {
                doc_id: doc.doc_id.clone(),
                topic: doc.topic_id.clone(),
                tokens: ex.tokens.clone(),
                e1: ex.e1,
                e2: ex.e2,
                label: ex.label,
                order_swapped: ex.order_swapped,
            };
            serde_json::to_writer(&mut out, &line)?;
            out.write_all(b"\n")?;
        }
    }
    Ok(())
}

pub fn save_corpus(docs: &[Document], path: impl AsRef<Path>) -> std::io::Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    write_corpus(docs, &mut w)?;
    w.flush()
}

pub const PAD: &str = "<PAD>";
pub const UNK: &str = "<UNK>";
pub const MASK: &str = "<MASK>";
pub const E1_OPEN: &str = "<e1>";
pub const E1_CLOSE: &str = "</e1>";
pub const E2_OPEN: &str = "<e2>";
pub const E2_CLOSE: &str = "</e2>";

/// Reserved tokens, occupying ids `0..7` in this order.
pub const RESERVED: [&str; 7] = [PAD, UNK, MASK, E1_OPEN, E1_CLOSE, E2_OPEN, E2_CLOSE];

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const MASK_ID: usize = 2;
pub const E1_OPEN_ID: usize = 3;
pub const E1_CLOSE_ID: usize = 4;
pub const E2_OPEN_ID: usize = 5;
pub const E2_CLOSE_ID: usize = 6;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Vocabulary {
    /// Collects corpus tokens seen at least `min_count` times. Ordinary tokens
    /// follow the reserved block in lexicographic order.
    pub fn build(docs: &[Document], min_count: usize) -> Self {
        assert!(min_count >= 1, "min_count must be at least 1");
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for ex in docs.iter().flat_map(|d| &d.examples) {
            for t in &ex.tokens {
                *counts.entry(t.as_str()).or_default() += 1;
            }
        }
        let words = counts
            .into_iter()
            .filter(|&(t, c)| c >= min_count && !RESERVED.contains(&t))
            .map(|(t, _)| t.to_string());
        let tokens = RESERVED.iter().map(|s| s.to_string()).chain(words).collect();
        Self::from_tokens(tokens).expect("reserved prefix present")
    }

    /// Rebuilds a vocabulary from its id-ordered token list.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self, String> {
        if tokens.len() < RESERVED.len() || tokens.iter().zip(RESERVED).any(|(t, r)| t != r) {
            return Err("vocabulary must start with the reserved tokens".into());
        }
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if ids.insert(t.clone(), i).is_some() {
                return Err(format!("duplicate vocabulary entry {t:?}"));
            }
        }
        Ok(Self { tokens, ids })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.ids.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.ids.contains_key(token)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn is_reserved(id: usize) -> bool {
        id < RESERVED.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitMode {
    /// Topic-disjoint folds.
    Ood,
    /// Documents shuffled before slicing.
    Id,
}

impl std::str::FromStr for SplitMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ood" => Ok(SplitMode::Ood),
            "id" => Ok(SplitMode::Id),
            other => Err(format!("unknown split mode {other:?} (expected ood or id)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub train: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub mode: SplitMode,
    pub k: usize,
    pub dev_topics: Vec<String>,
    pub dev_docs: Vec<String>,
    pub folds: Vec<Fold>,
    pub seed: u64,
}

impl FoldPlan {
    /// Hex SHA-256 of the plan's JSON form.
    pub fn fingerprint(&self) -> String {
        crate::fingerprint(&serde_json::to_vec(self).expect("serialisable"))
    }
}

fn sorted_topics(docs: &[Document]) -> Vec<&str> {
    docs.iter()
        .map(|d| d.topic_id.as_str())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect()
}

/// Training documents and a topic-disjoint development set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DevSplit {
    pub dev_topics: Vec<String>,
    pub dev_docs: Vec<String>,
    pub train_docs: Vec<String>,
}

/// Holds out the lexicographically last `dev_topic_count` topics.
pub fn hold_out_dev(docs: &[Document], dev_topic_count: usize) -> Result<DevSplit, CorpusError> {
    let mut seen = BTreeSet::new();
    for d in docs {
        if !seen.insert(d.doc_id.as_str()) {
            return Err(CorpusError::Validation {
                doc_id: d.doc_id.clone(),
                reason: "duplicate doc_id".into(),
            });
        }
    }
    let topics = sorted_topics(docs);
    if dev_topic_count > topics.len() {
        return Err(CorpusError::Config(format!(
            "{dev_topic_count} dev topics requested but only {} topics exist",
            topics.len()
        )));
    }
    let dev_topics: Vec<String> = topics[topics.len() - dev_topic_count..].iter().map(|s| s.to_string()).collect();
    let (dev, train): (Vec<&Document>, Vec<&Document>) = docs.iter().partition(|d| dev_topics.contains(&d.topic_id));
    Ok(DevSplit {
        dev_topics,
        dev_docs: dev.iter().map(|d| d.doc_id.clone()).collect(),
        train_docs: train.iter().map(|d| d.doc_id.clone()).collect(),
    })
}

/// Sorts topics lexicographically and holds out the last `dev_topic_count`
/// as the development set in both modes. OOD deals the remaining topics to
/// folds round-robin; ID shuffles the remaining documents and slices them.
pub fn make_folds(
    docs: &[Document],
    mode: SplitMode,
    k: usize,
    dev_topic_count: usize,
    seed: u64,
) -> Result<FoldPlan, CorpusError> {
    if k < 2 {
        return Err(CorpusError::Config(format!("k must be at least 2, got {k}")));
    }
    let held = hold_out_dev(docs, dev_topic_count)?;
    let topics = sorted_topics(docs);
    let split = topics.len() - dev_topic_count;
    let (dev_topics, dev_docs) = (held.dev_topics, held.dev_docs);
    let pool: Vec<&Document> = docs.iter().filter(|d| !dev_topics.contains(&d.topic_id)).collect();

    let test_sets: Vec<Vec<String>> = match mode {
        SplitMode::Ood => {
            let fold_topics = &topics[..split];
            if k > fold_topics.len() {
                return Err(CorpusError::Config(format!(
                    "k={k} exceeds the {} available topics",
                    fold_topics.len()
                )));
            }
            let fold_of: HashMap<&str, usize> =
                fold_topics.iter().enumerate().map(|(i, &t)| (t, i % k)).collect();
            let mut sets = vec![Vec::new(); k];
            for d in &pool {
                sets[fold_of[d.topic_id.as_str()]].push(d.doc_id.clone());
            }
            sets
        }
        SplitMode::Id => {
            if k > pool.len() {
                return Err(CorpusError::Config(format!(
                    "k={k} exceeds the {} available documents",
                    pool.len()
                )));
            }
            let mut ids: Vec<String> = pool.iter().map(|d| d.doc_id.clone()).collect();
            ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let n = ids.len();
            (0..k).map(|i| ids[i * n / k..(i + 1) * n / k].to_vec()).collect()
        }
    };

    let folds = test_sets
        .into_iter()
        .map(|test| {
            let held: BTreeSet<&str> = test.iter().map(String::as_str).collect();
            let train = pool
                .iter()
                .filter(|d| !held.contains(d.doc_id.as_str()))
                .map(|d| d.doc_id.clone())
                .collect();
            Fold { train, test }
        })
        .collect();

    Ok(FoldPlan {
        mode,
        k,
        dev_topics,
        dev_docs,
        folds,
        seed,
    })
}

/// All examples of the named documents, in corpus order.
pub fn examples_of(docs: &[Document], doc_ids: &[String]) -> Vec<SentenceExample> {
    let wanted: BTreeSet<&str> = doc_ids.iter().map(String::as_str).collect();
    docs.iter()
        .filter(|d| wanted.contains(d.doc_id.as_str()))
        .flat_map(|d| d.examples.iter().cloned())
        .collect()
}

/// Keeps every positive and each negative with probability `rate`.
pub fn negative_sample(examples: &[SentenceExample], rate: f64, seed: u64) -> Vec<SentenceExample> {
    assert!((0.0..=1.0).contains(&rate), "sampling rate {rate} outside [0,1]");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    examples
        .iter()
        .filter(|ex| ex.label || rng.gen::<f64>() < rate)
        .cloned()
        .collect()
}
