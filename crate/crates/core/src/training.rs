//! Epoch loop with per-epoch resampling, padded batching, AdamW updates and
//! best-dev checkpoint selection.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{negative_sample, SentenceExample, Vocabulary};
use crate::derive_seed;
use crate::encoding::{choose_mask, encode_pair, EncodedPair, MaskingStrategy};
use crate::error::{ModelError, TrainError};
use crate::evaluation::{score, Counts};
use crate::numerics::{AdamW, AdamWConfig, Graph, ParamStore, Tensor};
use crate::pipeline::{one_hot, ModelInput, SemDi, UnpaddedMasks};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Dropout rate used while training; copied into the model config.
    pub dropout: f64,
    pub masking_strategy: MaskingStrategy,
    pub seed: u64,
    pub negative_sampling_rate: f64,
    pub eval_every: usize,
    /// Global gradient-norm cap; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 20,
            lr: 1e-3,
            dropout: 0.1,
            masking_strategy: MaskingStrategy::Random,
            seed: 42,
            negative_sampling_rate: 1.0,
            eval_every: 1,
            clip_norm: Some(1.0),
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.epochs < 1 {
            return bad("epochs must be at least 1".into());
        }
        if self.batch_size < 1 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.lr > 0.0) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0,1)", self.dropout));
        }
        if !(0.0..=1.0).contains(&self.negative_sampling_rate) {
            return bad(format!(
                "negative_sampling_rate {} outside [0,1]",
                self.negative_sampling_rate
            ));
        }
        if self.eval_every < 1 {
            return bad("eval_every must be at least 1".into());
        }
        Ok(())
    }

    /// Seed of the mask draw used for every dev evaluation.
    pub fn eval_seed(&self) -> u64 {
        derive_seed(self.seed, STREAM_EVAL)
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }
}

/// An encoded pair padded to its batch's lengths.
#[derive(Debug, Clone, PartialEq)]
pub struct PaddedPair {
    pub pair: EncodedPair,
    pub marked_keep: Vec<bool>,
    pub masked_keep: Vec<bool>,
}

impl PaddedPair {
    pub fn input(&self) -> ModelInput<'_> {
        ModelInput {
            marked_ids: &self.pair.marked_ids,
            marked_keep: &self.marked_keep,
            masked_ids: &self.pair.masked_ids,
            masked_keep: &self.masked_keep,
            mask_pos: self.pair.mask_pos,
            masked_event: self.pair.masked_event,
            masked_event_positions: self.pair.masked_event_positions(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub items: Vec<PaddedPair>,
}

impl Batch {
    pub fn labels(&self) -> Vec<bool> {
        self.items.iter().map(|p| p.pair.label).collect()
    }
}

/// Splits into consecutive batches (last one may be short) and pads both
/// streams to each batch's longest sequence.
pub fn batch(examples: &[EncodedPair], batch_size: usize, pad_id: usize) -> Vec<Batch> {
    assert!(batch_size >= 1, "batch_size must be at least 1");
    examples
        .chunks(batch_size)
        .map(|chunk| {
            let marked_len = chunk.iter().map(|p| p.marked_ids.len()).max().unwrap_or(0);
            let masked_len = chunk.iter().map(|p| p.masked_ids.len()).max().unwrap_or(0);
            let items = chunk
                .iter()
                .map(|p| {
                    let mut pair = p.clone();
                    let marked_keep = keep_mask(pair.marked_ids.len(), marked_len);
                    let masked_keep = keep_mask(pair.masked_ids.len(), masked_len);
                    pair.marked_ids.resize(marked_len, pad_id);
                    pair.masked_ids.resize(masked_len, pad_id);
                    PaddedPair {
                        pair,
                        marked_keep,
                        masked_keep,
                    }
                })
                .collect();
            Batch { items }
        })
        .collect()
}

fn keep_mask(len: usize, padded: usize) -> Vec<bool> {
    (0..padded).map(|i| i < len).collect()
}

/// Mean cross-entropy of a batch, recorded on `g`.
pub fn batch_loss<R: rand::Rng>(
    model: &SemDi,
    g: &mut Graph<'_>,
    batch: &Batch,
    mut rng: Option<&mut R>,
) -> Result<crate::numerics::Var, ModelError> {
    let mut logits = Vec::with_capacity(batch.items.len());
    for item in &batch.items {
        let rec = model.forward_graph(g, &item.input(), rng.as_deref_mut())?;
        logits.push(rec.logits);
    }
    let stacked = g.concat_rows(&logits)?;
    Ok(g.cross_entropy(stacked, &one_hot(&batch.labels()))?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub dev_p: Option<f64>,
    pub dev_r: Option<f64>,
    pub dev_f1: Option<f64>,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub log: Vec<EpochLog>,
    /// Epoch whose parameters were kept.
    pub best_epoch: usize,
    pub best_dev_f1: Option<f64>,
}

/// Encodes every example with a mask drawn from `strategy`.
pub fn encode_all(
    examples: &[SentenceExample],
    vocab: &Vocabulary,
    strategy: MaskingStrategy,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<EncodedPair>, ModelError> {
    examples
        .iter()
        .map(|ex| encode_pair(ex, vocab, choose_mask(strategy, rng)))
        .collect()
}

/// Evaluation-mode predictions. Random masking uses a generator seeded by
/// `seed`, so repeated calls agree.
pub fn predict_all(
    model: &SemDi,
    vocab: &Vocabulary,
    examples: &[SentenceExample],
    strategy: MaskingStrategy,
    seed: u64,
) -> Result<Vec<bool>, ModelError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pairs = encode_all(examples, vocab, strategy, &mut rng)?;
    pairs.iter().map(|p| model.predict_pair(p)).collect()
}

pub fn evaluate(
    model: &SemDi,
    vocab: &Vocabulary,
    examples: &[SentenceExample],
    strategy: MaskingStrategy,
    seed: u64,
) -> Result<Counts, ModelError> {
    let preds = predict_all(model, vocab, examples, strategy, seed)?;
    let golds: Vec<bool> = examples.iter().map(|e| e.label).collect();
    Ok(score(&preds, &golds).expect("equal lengths"))
}

const STREAM_SAMPLE: u64 = 1;
const STREAM_MASK: u64 = 2;
const STREAM_DROPOUT: u64 = 3;
const STREAM_EVAL: u64 = 4;

/// Trains `model` in place. With a non-empty dev set the parameters of the
/// best dev-F1 evaluation are kept (ties go to the earlier epoch); without
/// one the final parameters are kept.
pub fn train(
    model: &mut SemDi,
    vocab: &Vocabulary,
    train_set: &[SentenceExample],
    dev_set: &[SentenceExample],
    cfg: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if !train_set.iter().any(|e| e.label) || !train_set.iter().any(|e| !e.label) {
        return Err(TrainError::Config(
            "training set needs at least one positive and one negative example".into(),
        ));
    }
    if model.config.vocab_size != vocab.len() {
        return Err(TrainError::Config(format!(
            "model vocab_size {} differs from vocabulary size {}",
            model.config.vocab_size,
            vocab.len()
        )));
    }
    model.config.dropout = cfg.dropout;
    let mut opt = AdamW::new(cfg.adamw(), &model.params);
    let eval_seed = cfg.eval_seed();

    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, ParamStore)> = None;

    for epoch in 1..=cfg.epochs {
        let e = epoch as u64;
        let sampled = if cfg.negative_sampling_rate < 1.0 {
            negative_sample(
                train_set,
                cfg.negative_sampling_rate,
                derive_seed(derive_seed(cfg.seed, STREAM_SAMPLE), e),
            )
        } else {
            train_set.to_vec()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(derive_seed(cfg.seed, STREAM_MASK), e));
        let mut pairs = encode_all(&sampled, vocab, cfg.masking_strategy, &mut rng)?;
        pairs.shuffle(&mut rng);
        let batches = batch(&pairs, cfg.batch_size, crate::corpus::PAD_ID);
        let mut drop_rng = ChaCha8Rng::seed_from_u64(derive_seed(derive_seed(cfg.seed, STREAM_DROPOUT), e));

        let mut loss_sum = 0.0;
        for (bi, b) in batches.iter().enumerate() {
            let numeric = |source: ModelError| TrainError::Numeric {
                epoch,
                batch: bi,
                source,
            };
            model.params.zero_grad();
            let (loss_value, grads) = {
                let mut g = Graph::new(&model.params);
                let loss = batch_loss(model, &mut g, b, Some(&mut drop_rng)).map_err(numeric)?;
                let grads = g.backward(loss).map_err(|e| numeric(e.into()))?;
                (g.value(loss).data()[0], grads)
            };
            grads.accumulate_into(&mut model.params);
            let norm = match cfg.clip_norm {
                Some(max) => model.params.clip_grad_norm(max),
                None => model.params.grad_norm(),
            };
            if !norm.is_finite() {
                return Err(numeric(ModelError::Numeric(crate::error::NumericError::NonFinite {
                    op: "gradient",
                })));
            }
            opt.step(&mut model.params);
            loss_sum += loss_value * b.items.len() as f64;
        }
        let mean_loss = loss_sum / pairs.len().max(1) as f64;

        let mut entry = EpochLog {
            epoch,
            mean_loss,
            dev_p: None,
            dev_r: None,
            dev_f1: None,
            lr: cfg.lr,
        };
        let due = epoch % cfg.eval_every == 0 || epoch == cfg.epochs;
        if due && !dev_set.is_empty() {
            let counts = evaluate(model, vocab, dev_set, cfg.masking_strategy, eval_seed)?;
            let f1 = counts.f1();
            entry.dev_p = Some(counts.precision());
            entry.dev_r = Some(counts.recall());
            entry.dev_f1 = Some(f1);
            if best.as_ref().is_none_or(|(b, _, _)| f1 > *b) {
                best = Some((f1, epoch, model.params.clone()));
            }
        }
        log.push(entry);
    }

    let (best_epoch, best_dev_f1) = match best {
        Some((f1, epoch, params)) => {
            model.params = params;
            (epoch, Some(f1))
        }
        None => (cfg.epochs, None),
    };
    Ok(TrainOutcome {
        log,
        best_epoch,
        best_dev_f1,
    })
}

/// Logits of single pairs evaluated without padding; used to check that
/// padding never changes a prediction.
pub fn unpadded_logits(model: &SemDi, pair: &EncodedPair) -> Result<Tensor, ModelError> {
    let masks = UnpaddedMasks::for_pair(pair);
    Ok(model.forward_input(&masks.input(pair))?.logits)
}

pub fn padded_logits(model: &SemDi, b: &Batch) -> Result<Vec<Tensor>, ModelError> {
    b.items
        .iter()
        .map(|item| Ok(model.forward_input(&item.input())?.logits))
        .collect()
}

pub fn predictions_from_logits(logits: &[Tensor]) -> Vec<bool> {
    logits.iter().map(|l| l.row(0)[1] > l.row(0)[0]).collect()
}
