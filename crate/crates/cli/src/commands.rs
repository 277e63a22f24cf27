use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use semdi::checkpoint::Checkpoint;
use semdi::corpus::{examples_of, hold_out_dev, load_corpus, make_folds, save_corpus, Document, SentenceExample, Vocabulary};
use semdi::derive_seed;
use semdi::encoding::{choose_mask, encode_pair, MaskedEvent, MaskingStrategy};
use semdi::evaluation::{cross_validate, render_table, EvalReport};
use semdi::heatmap;
use semdi::model::ModelConfig;
use semdi::pipeline::{readout_fill_in, readout_rank, SemDi, Variant};
use semdi::synthetic::{make_synthetic_corpus, SynthConfig};
use semdi::training::train;

use crate::config::{seed_override, RunConfig};
use crate::Failure;

pub type CmdResult = Result<(), Failure>;

/// Writes `bytes` to `path`, or to stdout when there is no path.
pub fn emit(path: Option<&Path>, bytes: &[u8]) -> CmdResult {
    match path {
        Some(p) => std::fs::write(p, bytes)
            .with_context(|| format!("writing {}", p.display()))
            .map_err(Failure::usage),
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(bytes)
                .and_then(|_| out.flush())
                .context("writing to stdout")
                .map_err(Failure::usage)
        }
    }
}

fn json<T: Serialize>(value: &T) -> Vec<u8> {
    let mut v = serde_json::to_vec_pretty(value).expect("serialisable");
    v.push(b'\n');
    v
}

fn read_docs(path: &Path) -> Result<Vec<Document>, Failure> {
    load_corpus(path)
        .with_context(|| format!("loading corpus {}", path.display()))
        .map_err(Failure::usage)
}

/// Vocabulary over the whole corpus and a model config sized to it.
fn prepare(docs: &[Document], model: &ModelConfig) -> Result<(Vocabulary, ModelConfig), Failure> {
    let vocab = Vocabulary::build(docs, 1);
    let mut cfg = model.clone();
    cfg.vocab_size = vocab.len();
    let longest = docs.iter().flat_map(|d| &d.examples).map(|e| e.tokens.len() + 4).max().unwrap_or(0);
    if longest > cfg.max_len {
        return Err(Failure::usage(anyhow!(
            "max_len {} is shorter than the longest marked sentence ({longest} tokens)",
            cfg.max_len
        )));
    }
    Ok((vocab, cfg))
}

pub struct SynthArgs {
    pub out: Option<PathBuf>,
    pub docs: usize,
    pub topics: usize,
    pub pairs_per_doc: usize,
    pub seed: Option<u64>,
    pub topic_cues: bool,
}

pub fn synth(a: SynthArgs) -> CmdResult {
    if a.docs == 0 || a.topics == 0 || a.pairs_per_doc == 0 {
        return Err(Failure::usage(anyhow!("--docs, --topics and --pairs-per-doc must be at least 1")));
    }
    let seed = seed_override(a.seed).map_err(Failure::usage)?.unwrap_or(42);
    let cfg = if a.topic_cues {
        SynthConfig::topic_shifted(a.docs, a.topics, a.pairs_per_doc, seed)
    } else {
        SynthConfig::cue(a.docs, a.topics, a.pairs_per_doc, seed)
    };
    let docs = make_synthetic_corpus(&cfg);
    match &a.out {
        Some(p) => save_corpus(&docs, p)
            .with_context(|| format!("writing {}", p.display()))
            .map_err(Failure::usage),
        None => {
            let mut buf = Vec::new();
            semdi::corpus::write_corpus(&docs, &mut buf).expect("in-memory write");
            emit(None, &buf)
        }
    }
}

pub struct TrainArgs {
    pub corpus: PathBuf,
    pub run: RunConfig,
    pub variant: Variant,
    pub out: PathBuf,
    pub log: Option<PathBuf>,
}

pub fn train_cmd(a: TrainArgs) -> CmdResult {
    let docs = read_docs(&a.corpus)?;
    let (vocab, cfg) = prepare(&docs, &a.run.model)?;
    let split = hold_out_dev(&docs, a.run.split.dev_topics).map_err(Failure::usage)?;
    let train_set = examples_of(&docs, &split.train_docs);
    let dev_set = examples_of(&docs, &split.dev_docs);
    let mut model = SemDi::new(cfg, a.variant, a.run.train.seed).map_err(Failure::usage)?;
    let outcome = train(&mut model, &vocab, &train_set, &dev_set, &a.run.train).map_err(Failure::runtime)?;
    let ck = Checkpoint {
        model,
        vocab,
        masking_strategy: a.run.train.masking_strategy,
    };
    ck.save(&a.out)
        .with_context(|| format!("writing checkpoint {}", a.out.display()))
        .map_err(Failure::usage)?;
    let mut log = Vec::new();
    for entry in &outcome.log {
        serde_json::to_writer(&mut log, entry).expect("serialisable");
        log.push(b'\n');
    }
    emit(a.log.as_deref(), &log)?;
    eprintln!(
        "kept epoch {} (dev F1 {})",
        outcome.best_epoch,
        outcome.best_dev_f1.map_or("n/a".to_string(), |f| format!("{f:.4}"))
    );
    Ok(())
}

pub struct CvArgs {
    pub corpus: PathBuf,
    pub run: RunConfig,
    pub variant: Variant,
    pub jobs: usize,
    pub out: Option<PathBuf>,
    pub table: Option<PathBuf>,
}

fn run_cv(docs: &[Document], run: &RunConfig, variant: Variant, jobs: usize) -> Result<EvalReport, Failure> {
    let (_, cfg) = prepare(docs, &run.model)?;
    let s = &run.split;
    let plan = make_folds(docs, s.mode, s.k, s.dev_topics, s.seed).map_err(Failure::usage)?;
    cross_validate(docs, &plan, &cfg, &run.train, variant, jobs).map_err(Failure::runtime)
}

/// JSON to `out` (or stdout); the table to `table`, or to stdout when the
/// JSON went to a file.
fn emit_reports<T: Serialize>(value: &T, reports: &[EvalReport], out: Option<&Path>, table: Option<&Path>) -> CmdResult {
    emit(out, &json(value))?;
    let text = render_table(reports);
    match (table, out) {
        (Some(t), _) => emit(Some(t), text.as_bytes()),
        (None, Some(_)) => emit(None, text.as_bytes()),
        (None, None) => Ok(()),
    }
}

pub fn cv(a: CvArgs) -> CmdResult {
    let docs = read_docs(&a.corpus)?;
    let report = run_cv(&docs, &a.run, a.variant, a.jobs)?;
    emit_reports(&report, std::slice::from_ref(&report), a.out.as_deref(), a.table.as_deref())
}

pub struct SweepArgs {
    pub corpus: PathBuf,
    pub run: RunConfig,
    pub jobs: usize,
    pub out_dir: PathBuf,
}

fn write_sweep(dir: &Path, named: &[(String, EvalReport)]) -> CmdResult {
    std::fs::create_dir_all(dir)
        .with_context(|| format!("creating {}", dir.display()))
        .map_err(Failure::usage)?;
    for (name, report) in named {
        emit(Some(&dir.join(format!("{name}.json"))), &json(report))?;
    }
    let reports: Vec<EvalReport> = named.iter().map(|(_, r)| r.clone()).collect();
    let table = render_table(&reports);
    emit(Some(&dir.join("table.txt")), table.as_bytes())?;
    emit(None, table.as_bytes())
}

/// Every variant under one fold plan.
pub fn ablate(a: SweepArgs) -> CmdResult {
    let docs = read_docs(&a.corpus)?;
    let mut named = Vec::new();
    for v in Variant::ALL {
        eprintln!("variant {v}");
        named.push((v.name().to_string(), run_cv(&docs, &a.run, v, a.jobs)?));
    }
    write_sweep(&a.out_dir, &named)
}

/// The full model under every masking strategy.
pub fn mask_sweep(a: SweepArgs, variant: Variant) -> CmdResult {
    let docs = read_docs(&a.corpus)?;
    let mut named = Vec::new();
    for (name, strategy) in [
        ("random", MaskingStrategy::Random),
        ("e1", MaskingStrategy::Event1Only),
        ("e2", MaskingStrategy::Event2Only),
    ] {
        eprintln!("mask {name}");
        let mut run = a.run.clone();
        run.train.masking_strategy = strategy;
        let mut report = run_cv(&docs, &run, variant, a.jobs)?;
        report.method = format!("SemDI ({variant}, mask {name})");
        named.push((name.to_string(), report));
    }
    write_sweep(&a.out_dir, &named)
}

pub struct InspectArgs {
    pub ckpt: PathBuf,
    pub corpus: PathBuf,
    pub index: usize,
    pub event: Option<MaskedEvent>,
    pub seed: Option<u64>,
}

struct Inspected {
    ck: Checkpoint,
    example: SentenceExample,
    event: MaskedEvent,
}

/// Loads the checkpoint and example and fixes which event is masked: the
/// flag, else the checkpoint's strategy, drawn per index for `random`.
fn inspect(a: &InspectArgs) -> Result<Inspected, Failure> {
    let ck = Checkpoint::load(&a.ckpt)
        .with_context(|| format!("loading checkpoint {}", a.ckpt.display()))
        .map_err(Failure::usage)?;
    let docs = read_docs(&a.corpus)?;
    let all: Vec<&SentenceExample> = docs.iter().flat_map(|d| &d.examples).collect();
    let example = all
        .get(a.index)
        .map(|e| (*e).clone())
        .ok_or_else(|| Failure::usage(anyhow!("index {} out of range ({} examples)", a.index, all.len())))?;
    let longest = example.tokens.len() + 4;
    if longest > ck.model.config.max_len {
        return Err(Failure::usage(anyhow!("example {} is longer than the model's max_len", a.index)));
    }
    let seed = seed_override(a.seed).map_err(Failure::usage)?.unwrap_or(0);
    let event = a.event.unwrap_or_else(|| {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, a.index as u64));
        choose_mask(ck.masking_strategy, &mut rng)
    });
    Ok(Inspected { ck, example, event })
}

pub fn heatmap_cmd(a: InspectArgs, out: Option<PathBuf>, grid: Option<PathBuf>) -> CmdResult {
    let i = inspect(&a)?;
    if i.ck.model.variant == Variant::NoSde {
        return Err(Failure::usage(anyhow!("variant has no inquiry attention")));
    }
    let export = heatmap::export(&i.ck.model, &i.ck.vocab, &i.example, i.event).map_err(Failure::runtime)?;
    emit(out.as_deref(), &json(&export))?;
    let text = export.render_grid();
    match (grid, &out) {
        (Some(g), _) => emit(Some(&g), text.as_bytes()),
        (None, Some(_)) => emit(None, text.as_bytes()),
        (None, None) => Ok(()),
    }
}

#[derive(Serialize)]
struct Readout {
    masked_event: MaskedEvent,
    /// Surface tokens of the masked span with their readout rank.
    masked_tokens: Vec<(String, Option<usize>)>,
    top: Vec<(String, f64)>,
}

pub fn readout_cmd(a: InspectArgs, k: usize, out: Option<PathBuf>) -> CmdResult {
    let i = inspect(&a)?;
    let (model, vocab) = (&i.ck.model, &i.ck.vocab);
    let pair = encode_pair(&i.example, vocab, i.event).map_err(Failure::runtime)?;
    let record = model.forward(&pair).map_err(Failure::runtime)?;
    let span = match i.event {
        MaskedEvent::E1 => i.example.e1,
        MaskedEvent::E2 => i.example.e2,
    };
    let masked_tokens = i.example.tokens[span.start..span.end]
        .iter()
        .map(|t| (t.clone(), readout_rank(&record.c, model.word_table(), vocab, t)))
        .collect();
    let r = Readout {
        masked_event: i.event,
        masked_tokens,
        top: readout_fill_in(&record.c, model.word_table(), vocab, k),
    };
    emit(out.as_deref(), &json(&r))
}
