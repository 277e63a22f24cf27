use num_bigint::BigInt;
use num_rational::{BigRational, Ratio};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use semdi::corpus::{
    negative_sample, read_corpus, write_corpus, Document, SentenceExample, Span, Vocabulary, E1_CLOSE_ID, E1_OPEN_ID,
    E2_CLOSE_ID, E2_OPEN_ID, MASK_ID, PAD_ID,
};
use semdi::encoding::{encode_pair, MaskedEvent};
use semdi::evaluation::{score, Counts};
use semdi::model::{mha, AttentionParams, ModelConfig};
use semdi::numerics::{softmax_rows_masked, Graph, ParamStore, Tensor};
use semdi::pipeline::{SemDi, Variant};
use semdi::training::{batch, padded_logits, unpadded_logits};

const WORDS: [&str; 10] = ["storm", "flood", "the", "caused", "a", "of", "fire", "riot", "in", "was"];

fn word() -> impl Strategy<Value = String> {
    prop::sample::select(&WORDS[..]).prop_map(String::from)
}

/// `pre E1 mid E2 post` with non-empty, non-overlapping spans.
fn example() -> impl Strategy<Value = SentenceExample> {
    (0..3usize, 1..3usize, 0..3usize, 1..3usize, 0..3usize, any::<bool>()).prop_flat_map(
        |(pre, l1, mid, l2, post, label)| {
            let n = pre + l1 + mid + l2 + post;
            prop::collection::vec(word(), n).prop_map(move |tokens| SentenceExample {
                tokens,
                e1: Span::new(pre, pre + l1),
                e2: Span::new(pre + l1 + mid, pre + l1 + mid + l2),
                label,
                order_swapped: false,
            })
        },
    )
}

fn vocab_of(exs: &[SentenceExample]) -> Vocabulary {
    Vocabulary::build(
        &[Document {
            doc_id: "d".into(),
            topic_id: "t".into(),
            examples: exs.to_vec(),
        }],
        1,
    )
}

/// True iff `f` is the double nearest to `r` (ties either way).
fn nearest_double(f: f64, r: &BigRational) -> bool {
    let zero = frac(0, 1);
    let dist = |x: f64| {
        let v = BigRational::from_float(x).unwrap() - r;
        if v < zero {
            -v
        } else {
            v
        }
    };
    let d = dist(f);
    d <= dist(f.next_up()) && d <= dist(f.next_down())
}

fn frac(n: u64, d: u64) -> BigRational {
    if d == 0 {
        BigRational::from_integer(BigInt::from(0))
    } else {
        BigRational::new(BigInt::from(n), BigInt::from(d))
    }
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one_and_masked_get_zero(
        rows in 1..4usize,
        vals in prop::collection::vec(-30.0..30.0f64, 8),
        keep in prop::collection::vec(any::<bool>(), 8),
    ) {
        prop_assume!(keep.iter().any(|&k| k));
        let x = Tensor::new(vec![rows, 8], (0..rows * 8).map(|i| vals[i % 8] + i as f64).collect()).unwrap();
        let y = softmax_rows_masked(&x, Some(&keep));
        for r in 0..rows {
            let row = y.row(r);
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for (w, k) in row.iter().zip(&keep) {
                if !k {
                    prop_assert_eq!(*w, 0.0);
                }
            }
        }
    }

    #[test]
    fn negative_sampling_keeps_every_positive(
        labels in prop::collection::vec(any::<bool>(), 0..60),
        rate in 0.0..=1.0f64,
        seed in any::<u64>(),
    ) {
        let exs: Vec<SentenceExample> = labels
            .iter()
            .map(|&label| SentenceExample {
                tokens: vec!["a".into(), "b".into()],
                e1: Span::new(0, 1),
                e2: Span::new(1, 2),
                label,
                order_swapped: false,
            })
            .collect();
        let kept = negative_sample(&exs, rate, seed);
        let pos = |v: &[SentenceExample]| v.iter().filter(|e| e.label).count();
        prop_assert_eq!(pos(&kept), pos(&exs));
        prop_assert_eq!(kept.clone(), negative_sample(&exs, rate, seed));
        if rate == 1.0 {
            prop_assert_eq!(kept.len(), exs.len());
        }
    }

    #[test]
    fn corpus_round_trips_through_jsonl(docs in prop::collection::vec(prop::collection::vec(example(), 1..4), 1..5)) {
        let docs: Vec<Document> = docs
            .into_iter()
            .enumerate()
            .map(|(i, examples)| Document {
                doc_id: format!("doc{i}"),
                topic_id: format!("topic{}", i % 2),
                examples,
            })
            .collect();
        let mut buf = Vec::new();
        write_corpus(&docs, &mut buf).unwrap();
        let back = read_corpus(buf.as_slice()).unwrap();
        prop_assert_eq!(back, docs);
    }

    #[test]
    fn marker_and_mask_invariants(ex in example(), first in any::<bool>()) {
        let vocab = vocab_of(std::slice::from_ref(&ex));
        let event = if first { MaskedEvent::E1 } else { MaskedEvent::E2 };
        let p = encode_pair(&ex, &vocab, event).unwrap();
        let n = ex.tokens.len();
        prop_assert_eq!(p.marked_ids.len(), n + 4);
        for m in [E1_OPEN_ID, E1_CLOSE_ID, E2_OPEN_ID, E2_CLOSE_ID] {
            prop_assert_eq!(p.marked_ids.iter().filter(|&&i| i == m).count(), 1);
        }
        let span = if first { ex.e1 } else { ex.e2 };
        prop_assert_eq!(p.masked_ids.len(), n + 3 - span.len());
        if span.len() == 1 {
            prop_assert_eq!(p.masked_ids.len(), p.marked_ids.len() - 2);
        }
        let (gone, kept) = if first { ([E1_OPEN_ID, E1_CLOSE_ID], [E2_OPEN_ID, E2_CLOSE_ID]) } else { ([E2_OPEN_ID, E2_CLOSE_ID], [E1_OPEN_ID, E1_CLOSE_ID]) };
        for m in gone {
            prop_assert!(!p.masked_ids.contains(&m));
        }
        for m in kept {
            prop_assert_eq!(p.masked_ids.iter().filter(|&&i| i == m).count(), 1);
        }
        prop_assert_eq!(p.masked_ids.iter().filter(|&&i| i == MASK_ID).count(), 1);
        prop_assert_eq!(p.masked_ids[p.mask_pos], MASK_ID);
        let content: Vec<usize> = p.marked_ids.iter().copied().filter(|&i| i > E2_CLOSE_ID || i < E1_OPEN_ID).collect();
        let ids: Vec<usize> = ex.tokens.iter().map(|t| vocab.id(t)).collect();
        prop_assert_eq!(content, ids);
        for (&pos, tok) in p.event1_positions.iter().zip(&ex.tokens[ex.e1.start..ex.e1.end]) {
            prop_assert_eq!(p.marked_ids[pos], vocab.id(tok));
        }
    }

    #[test]
    fn metrics_match_rational_oracle(tp in 0..500u64, fp in 0..500u64, fn_ in 0..500u64, tn in 0..500u64) {
        let c = Counts { tp, fp, fn_, tn };
        let p = frac(tp, tp + fp);
        let r = frac(tp, tp + fn_);
        let f1 = if &p + &r == frac(0, 1) { frac(0, 1) } else { (&p * &r * BigInt::from(2)) / (&p + &r) };
        prop_assert!(nearest_double(c.precision(), &p));
        prop_assert!(nearest_double(c.recall(), &r));
        prop_assert!(nearest_double(c.f1(), &f1));
    }

    #[test]
    fn score_counts_each_cell(pairs in prop::collection::vec((any::<bool>(), any::<bool>()), 0..80)) {
        let (preds, golds): (Vec<bool>, Vec<bool>) = pairs.iter().copied().unzip();
        let c = score(&preds, &golds).unwrap();
        prop_assert_eq!(c.total(), pairs.len() as u64);
        prop_assert_eq!(c.tp, pairs.iter().filter(|&&(p, g)| p && g).count() as u64);
        prop_assert_eq!(c.fn_, pairs.iter().filter(|&&(p, g)| !p && g).count() as u64);
    }

    #[test]
    fn attention_rows_normalised_and_pads_ignored(
        seed in any::<u64>(),
        len in 1..10usize,
        pads in 0..4usize,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let att = AttentionParams::init(&mut store, "a", 8, 2, &mut rng);
        let total = len + pads;
        let keys = Tensor::new(vec![total, 8], (0..total * 8).map(|i| ((i * 37 % 11) as f64 - 5.0) * 0.3).collect()).unwrap();
        let keep: Vec<bool> = (0..total).map(|i| i < len).collect();
        let mut g = Graph::new(&store);
        let q = g.constant(Tensor::new(vec![1, 8], vec![0.4, -1.0, 2.0, 0.1, 0.0, 1.5, -0.7, 0.2]).unwrap());
        let k = g.constant(keys);
        let out = mha(&mut g, q, k, &att, Some(&keep)).unwrap();
        for w in out.weights {
            let row = g.value(w).row(0);
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(row[len..].iter().all(|&x| x < 1e-12));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn padding_never_changes_logits(exs in prop::collection::vec(example(), 2..5), seed in 0..1000u64) {
        let vocab = vocab_of(&exs);
        let cfg = ModelConfig {
            d: 16,
            heads: 2,
            layers: 1,
            ffn_mult: 2,
            vocab_size: vocab.len(),
            max_len: 32,
            ..ModelConfig::default()
        };
        for variant in Variant::ALL {
            let model = SemDi::new(cfg.clone(), variant, seed).unwrap();
            let pairs: Vec<_> = exs
                .iter()
                .enumerate()
                .map(|(i, e)| encode_pair(e, &vocab, if i % 2 == 0 { MaskedEvent::E1 } else { MaskedEvent::E2 }).unwrap())
                .collect();
            let b = batch(&pairs, pairs.len(), PAD_ID).remove(0);
            let padded = padded_logits(&model, &b).unwrap();
            for (pair, lp) in pairs.iter().zip(&padded) {
                let alone = unpadded_logits(&model, pair).unwrap();
                for (a, b) in alone.data().iter().zip(lp.data()) {
                    prop_assert!((a - b).abs() < 1e-9, "{variant}: {a} vs {b}");
                }
            }
        }
    }
}

#[test]
fn rational_oracle_worked_case() {
    let c = Counts { tp: 3, fp: 1, fn_: 2, tn: 0 };
    assert!(nearest_double(c.f1(), &BigRational::from(Ratio::new(BigInt::from(2), BigInt::from(3)))));
    assert_eq!(c.precision(), 0.75);
    assert_eq!(c.recall(), 0.6);
}
