//! Precision/recall/F1, the cross-validation driver, and report rendering.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::corpus::{examples_of, Document, FoldPlan, Vocabulary};
use crate::derive_seed;
use crate::error::{NumericError, TrainError};
use crate::model::ModelConfig;
use crate::pipeline::{SemDi, Variant};
use crate::training::{evaluate, train, TrainConfig};

/// Confusion counts over the causal class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl Counts {
    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    /// `2PR/(P+R)`, 0 when `P+R = 0`. Evaluated as `2tp/(2tp+fp+fn)`, the
    /// same quantity with a single rounding.
    pub fn f1(&self) -> f64 {
        if self.tp == 0 {
            0.0
        } else {
            ratio(2 * self.tp, 2 * self.tp + self.fp + self.fn_)
        }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

impl std::ops::Add for Counts {
    type Output = Counts;

    fn add(self, o: Counts) -> Counts {
        Counts {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
            tn: self.tn + o.tn,
        }
    }
}

impl std::iter::Sum for Counts {
    fn sum<I: Iterator<Item = Counts>>(iter: I) -> Counts {
        iter.fold(Counts::default(), |a, b| a + b)
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn score(predictions: &[bool], golds: &[bool]) -> Result<Counts, NumericError> {
    if predictions.len() != golds.len() {
        return Err(NumericError::Usage(format!(
            "{} predictions for {} gold labels",
            predictions.len(),
            golds.len()
        )));
    }
    let mut c = Counts::default();
    for (&p, &g) in predictions.iter().zip(golds) {
        match (p, g) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    #[serde(flatten)]
    pub counts: Counts,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl From<Counts> for Metrics {
    fn from(counts: Counts) -> Self {
        Self {
            counts,
            precision: counts.precision(),
            recall: counts.recall(),
            f1: counts.f1(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    #[serde(flatten)]
    pub metrics: Metrics,
    pub best_epoch: usize,
    pub best_dev_f1: Option<f64>,
}

/// Micro-averaged result of a cross-validation run, with per-fold detail.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    #[serde(flatten)]
    pub metrics: Metrics,
    pub per_fold: Vec<FoldResult>,
    pub config_fingerprint: String,
    pub fold_fingerprint: String,
}

impl EvalReport {
    pub fn f1(&self) -> f64 {
        self.metrics.f1
    }
}

/// Hex SHA-256 over the JSON of both configs.
pub fn config_fingerprint(model: &ModelConfig, train: &TrainConfig) -> String {
    let json = serde_json::to_vec(&(model, train)).expect("serialisable");
    crate::fingerprint(&json)
}

/// Trains one fresh model per fold and scores it on that fold's test
/// documents. At most `jobs` folds train concurrently.
pub fn cross_validate(
    docs: &[Document],
    plan: &FoldPlan,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    variant: Variant,
    jobs: usize,
) -> Result<EvalReport, TrainError> {
    let vocab = Vocabulary::build(docs, 1);
    let mut cfg = model_cfg.clone();
    cfg.vocab_size = vocab.len();
    let dev = examples_of(docs, &plan.dev_docs);

    let run_fold = |i: usize| -> Result<FoldResult, TrainError> {
        let fold = &plan.folds[i];
        let train_set = examples_of(docs, &fold.train);
        let test_set = examples_of(docs, &fold.test);
        let mut fold_cfg = train_cfg.clone();
        fold_cfg.seed = derive_seed(train_cfg.seed, 100 + i as u64);
        let mut model = SemDi::new(cfg.clone(), variant, fold_cfg.seed)?;
        let outcome = train(&mut model, &vocab, &train_set, &dev, &fold_cfg)?;
        let counts = evaluate(
            &model,
            &vocab,
            &test_set,
            fold_cfg.masking_strategy,
            derive_seed(fold_cfg.seed, 7),
        )?;
        Ok(FoldResult {
            fold: i,
            metrics: counts.into(),
            best_epoch: outcome.best_epoch,
            best_dev_f1: outcome.best_dev_f1,
        })
    };

    let k = plan.folds.len();
    let jobs = jobs.clamp(1, k.max(1));
    let mut results: Vec<Option<Result<FoldResult, TrainError>>> = (0..k).map(|_| None).collect();
    if jobs == 1 {
        for (i, slot) in results.iter_mut().enumerate() {
            *slot = Some(run_fold(i));
        }
    } else {
        let next = std::sync::atomic::AtomicUsize::new(0);
        let collected = std::sync::Mutex::new(&mut results);
        std::thread::scope(|s| {
            for _ in 0..jobs {
                s.spawn(|| loop {
                    let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                    if i >= k {
                        break;
                    }
                    let r = run_fold(i);
                    collected.lock().expect("fold results lock")[i] = Some(r);
                });
            }
        });
    }

    let per_fold = results
        .into_iter()
        .map(|r| r.expect("every fold ran"))
        .collect::<Result<Vec<_>, _>>()?;
    let total: Counts = per_fold.iter().map(|f| f.metrics.counts).sum();
    Ok(EvalReport {
        method: format!("SemDI ({variant})"),
        metrics: total.into(),
        per_fold,
        config_fingerprint: config_fingerprint(&cfg, train_cfg),
        fold_fingerprint: plan.fingerprint(),
    })
}

/// Plain-text `Method | P | R | F1` table, percentages to one decimal.
pub fn render_table(reports: &[EvalReport]) -> String {
    let width = reports
        .iter()
        .map(|r| r.method.len())
        .chain(std::iter::once("Method".len()))
        .max()
        .unwrap_or(6);
    let mut out = String::new();
    let _ = writeln!(out, "{:<width$} | {:>5} | {:>5} | {:>5}", "Method", "P", "R", "F1");
    let _ = writeln!(out, "{}-|-------|-------|------", "-".repeat(width));
    for r in reports {
        let m = &r.metrics;
        let _ = writeln!(
            out,
            "{:<width$} | {:>5.1} | {:>5.1} | {:>5.1}",
            r.method,
            100.0 * m.precision,
            100.0 * m.recall,
            100.0 * m.f1
        );
    }
    out
}
