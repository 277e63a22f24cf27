//! The full causality-inquiry forward pass and its ablations.
//!
//! ```text
//! c      = Encoder(X̂)[mask_pos]            fill-in token from the cloze pass
//! H      = Encoder(X)                      dependency matrix of the marked sentence
//! z      = MHA(c, H)                       causality inquiry
//! y_z    = ReLU(z·W_in + b_in)·W_out + b_out
//! logits = y_z·W_y + b_y                   index 0 = not causal, 1 = causal
//! ```

use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Vocabulary, PAD_ID};
use crate::encoding::{EncodedPair, MaskedEvent};
use crate::error::ModelError;
use crate::model::{
    embed, encoder_forward, mha, position_table, AttentionParams, Dropout, EncoderParams, ModelConfig,
};
use crate::numerics::{Graph, ParamId, ParamStore, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Full,
    /// The masked event's own span representation replaces the fill-in token.
    NoCa,
    /// The fill-in token goes straight to the head, no dependency inquiry.
    NoSde,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Full, Variant::NoCa, Variant::NoSde];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoCa => "no-ca",
            Variant::NoSde => "no-sde",
        }
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "full" => Ok(Variant::Full),
            "no-ca" => Ok(Variant::NoCa),
            "no-sde" => Ok(Variant::NoSde),
            other => Err(format!("unknown variant {other:?} (full|no-ca|no-sde)")),
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Parameter handles of the whole network.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub word: ParamId,
    /// Stack used on the marked sentence.
    pub sde: EncoderParams,
    /// Stack used on the masked sentence; equal to `sde` when tied.
    pub ca: EncoderParams,
    pub inquiry: AttentionParams,
    pub w_in: ParamId,
    pub b_in: ParamId,
    pub w_out: ParamId,
    pub b_out: ParamId,
    pub w_y: ParamId,
    pub b_y: ParamId,
}

impl Layout {
    fn init<R: Rng>(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut R) -> Self {
        let d = cfg.d;
        let scale = 1.0 / (d as f64).sqrt();
        let word = store.insert_uniform("embed.word", &[cfg.vocab_size, d], scale, rng);
        let sde = EncoderParams::init(store, "enc", cfg, rng);
        let ca = if cfg.tied_encoder {
            sde.clone()
        } else {
            EncoderParams::init(store, "ca_enc", cfg, rng)
        };
        let inquiry = AttentionParams::init(store, "disc.inquiry", d, cfg.heads, rng);
        let w_in = store.insert_uniform("disc.ffn.w_in", &[d, d], scale, rng);
        let b_in = store.insert("disc.ffn.b_in", Tensor::zeros(&[1, d]));
        let w_out = store.insert_uniform("disc.ffn.w_out", &[d, d], scale, rng);
        let b_out = store.insert("disc.ffn.b_out", Tensor::zeros(&[1, d]));
        let w_y = store.insert_uniform("cls.w_y", &[d, 2], scale, rng);
        let b_y = store.insert("cls.b_y", Tensor::zeros(&[1, 2]));
        Self {
            word,
            sde,
            ca,
            inquiry,
            w_in,
            b_in,
            w_out,
            b_out,
            w_y,
            b_y,
        }
    }

    /// Rebinds handles by name against an existing store.
    fn bind(store: &ParamStore, cfg: &ModelConfig) -> Result<Self, ModelError> {
        // registering into a scratch store reproduces the names in order
        let mut scratch = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let shadow = Self::init(&mut scratch, cfg, &mut rng);
        if scratch.len() != store.len() {
            return Err(ModelError::Config(format!(
                "checkpoint has {} parameters, config implies {}",
                store.len(),
                scratch.len()
            )));
        }
        for (id, p) in scratch.iter() {
            let other = store.get(id);
            if other.name != p.name || other.value.shape() != p.value.shape() {
                return Err(ModelError::Config(format!(
                    "parameter {} does not match config (found {} {:?})",
                    p.name,
                    other.name,
                    other.value.shape()
                )));
            }
        }
        Ok(shadow)
    }
}

/// Values produced by one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardRecord {
    /// Fill-in token, `1×d`.
    pub c: Tensor,
    /// Dependency matrix over the marked sentence; absent for NoSDE.
    pub h: Option<Tensor>,
    /// Inquiry result fed to the head, `1×d`.
    pub z: Tensor,
    pub logits: Tensor,
    /// Per-head `1×len` softmax weights of the inquiry; empty for NoSDE.
    pub inquiry_attention: Vec<Tensor>,
    pub mask_pos: usize,
    pub masked_event: MaskedEvent,
}

/// Graph handles for one forward pass, before values are read out.
#[derive(Debug, Clone)]
pub struct GraphRecord {
    pub c: Var,
    pub h: Option<Var>,
    pub z: Var,
    pub logits: Var,
    pub inquiry_attention: Vec<Var>,
}

impl GraphRecord {
    pub fn read(&self, g: &Graph<'_>, input: &ModelInput<'_>) -> ForwardRecord {
        ForwardRecord {
            c: g.value(self.c).clone(),
            h: self.h.map(|h| g.value(h).clone()),
            z: g.value(self.z).clone(),
            logits: g.value(self.logits).clone(),
            inquiry_attention: self.inquiry_attention.iter().map(|&w| g.value(w).clone()).collect(),
            mask_pos: input.mask_pos,
            masked_event: input.masked_event,
        }
    }
}

/// One (possibly padded) example as seen by the network.
#[derive(Debug, Clone, Copy)]
pub struct ModelInput<'a> {
    pub marked_ids: &'a [usize],
    pub marked_keep: &'a [bool],
    pub masked_ids: &'a [usize],
    pub masked_keep: &'a [bool],
    pub mask_pos: usize,
    pub masked_event: MaskedEvent,
    pub masked_event_positions: &'a [usize],
}

/// Owned keep-masks for an unpadded pair.
pub struct UnpaddedMasks {
    marked: Vec<bool>,
    masked: Vec<bool>,
}

impl UnpaddedMasks {
    pub fn for_pair(pair: &EncodedPair) -> Self {
        Self {
            marked: pair.marked_ids.iter().map(|&i| i != PAD_ID).collect(),
            masked: pair.masked_ids.iter().map(|&i| i != PAD_ID).collect(),
        }
    }

    pub fn input<'a>(&'a self, pair: &'a EncodedPair) -> ModelInput<'a> {
        ModelInput {
            marked_ids: &pair.marked_ids,
            marked_keep: &self.marked,
            masked_ids: &pair.masked_ids,
            masked_keep: &self.masked,
            mask_pos: pair.mask_pos,
            masked_event: pair.masked_event,
            masked_event_positions: pair.masked_event_positions(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SemDi {
    pub config: ModelConfig,
    pub variant: Variant,
    pub layout: Layout,
    pub params: ParamStore,
    positions: Tensor,
}

impl SemDi {
    pub fn new(config: ModelConfig, variant: Variant, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layout = Layout::init(&mut params, &config, &mut rng);
        let positions = position_table(config.max_len, config.d);
        Ok(Self {
            config,
            variant,
            layout,
            params,
            positions,
        })
    }

    /// Wraps an already-populated store, e.g. from a checkpoint.
    pub fn from_params(config: ModelConfig, variant: Variant, params: ParamStore) -> Result<Self, ModelError> {
        config.validate()?;
        let layout = Layout::bind(&params, &config)?;
        let positions = position_table(config.max_len, config.d);
        Ok(Self {
            config,
            variant,
            layout,
            params,
            positions,
        })
    }

    /// Records the forward pass of one example on `g`. Passing a generator
    /// turns on training-mode dropout.
    pub fn forward_graph<R: Rng>(
        &self,
        g: &mut Graph<'_>,
        input: &ModelInput<'_>,
        rng: Option<&mut R>,
    ) -> Result<GraphRecord, ModelError> {
        let cfg = &self.config;
        let l = &self.layout;
        let mut drop = Dropout {
            rate: cfg.dropout,
            rng,
        };

        let run_sde = |g: &mut Graph<'_>, drop: &mut Dropout<'_, R>| -> Result<Var, ModelError> {
            let x = embed(g, cfg, l.word, &self.positions, input.marked_ids)?;
            let x = drop.apply(g, x)?;
            encoder_forward(g, x, &l.sde, Some(input.marked_keep), drop)
        };
        let run_ca = |g: &mut Graph<'_>, drop: &mut Dropout<'_, R>| -> Result<Var, ModelError> {
            let x = embed(g, cfg, l.word, &self.positions, input.masked_ids)?;
            let x = drop.apply(g, x)?;
            let hidden = encoder_forward(g, x, &l.ca, Some(input.masked_keep), drop)?;
            Ok(g.row(hidden, input.mask_pos)?)
        };

        let (c, h, z, weights) = match self.variant {
            Variant::Full => {
                let c = run_ca(g, &mut drop)?;
                let h = run_sde(g, &mut drop)?;
                let att = mha(g, c, h, &l.inquiry, Some(input.marked_keep))?;
                (c, Some(h), att.output, att.weights)
            }
            Variant::NoCa => {
                let h = run_sde(g, &mut drop)?;
                if input.masked_event_positions.is_empty() {
                    return Err(ModelError::Internal("masked event has no positions".into()));
                }
                let c = g.mean_rows(h, input.masked_event_positions)?;
                let att = mha(g, c, h, &l.inquiry, Some(input.marked_keep))?;
                (c, Some(h), att.output, att.weights)
            }
            Variant::NoSde => {
                let c = run_ca(g, &mut drop)?;
                (c, None, c, Vec::new())
            }
        };

        let zd = drop.apply(g, z)?;
        let (w_in, b_in, w_out, b_out) = (g.param(l.w_in), g.param(l.b_in), g.param(l.w_out), g.param(l.b_out));
        let y = g.matmul(zd, w_in)?;
        let y = g.add_row(y, b_in)?;
        let y = g.relu(y)?;
        let y = g.matmul(y, w_out)?;
        let y = g.add_row(y, b_out)?;
        let (w_y, b_y) = (g.param(l.w_y), g.param(l.b_y));
        let logits = g.matmul(y, w_y)?;
        let logits = g.add_row(logits, b_y)?;
        Ok(GraphRecord {
            c,
            h,
            z,
            logits,
            inquiry_attention: weights,
        })
    }

    /// Evaluation-mode forward pass (dropout off) for one unpadded pair.
    pub fn forward(&self, pair: &EncodedPair) -> Result<ForwardRecord, ModelError> {
        let masks = UnpaddedMasks::for_pair(pair);
        self.forward_input(&masks.input(pair))
    }

    pub fn forward_input(&self, input: &ModelInput<'_>) -> Result<ForwardRecord, ModelError> {
        let mut g = Graph::new(&self.params);
        let rec = self.forward_graph::<ChaCha8Rng>(&mut g, input, None)?;
        Ok(rec.read(&g, input))
    }

    pub fn predict_pair(&self, pair: &EncodedPair) -> Result<bool, ModelError> {
        Ok(predict(&self.forward(pair)?))
    }

    pub fn word_table(&self) -> &Tensor {
        self.params.value(self.layout.word)
    }
}

/// Cross-entropy of `softmax(logits)` against the one-hot gold label.
pub fn loss(record: &ForwardRecord, gold: bool) -> Tensor {
    Tensor::scalar(loss_value(&record.logits, gold))
}

pub fn loss_value(logits: &Tensor, gold: bool) -> f64 {
    let row = logits.row(0);
    let max = row[0].max(row[1]);
    let lse = max + ((row[0] - max).exp() + (row[1] - max).exp()).ln();
    lse - row[usize::from(gold)]
}

pub fn one_hot(labels: &[bool]) -> Tensor {
    let mut t = Tensor::zeros(&[labels.len(), 2]);
    for (i, &y) in labels.iter().enumerate() {
        t.row_mut(i)[usize::from(y)] = 1.0;
    }
    t
}

/// Argmax over `[not causal, causal]`; an exact tie is not causal.
pub fn predict(record: &ForwardRecord) -> bool {
    let l = record.logits.row(0);
    l[1] > l[0]
}

/// Scores the fill-in vector against the word table and returns the top `k`
/// non-reserved tokens, best first. Diagnostic only.
pub fn readout_fill_in(c: &Tensor, word_table: &Tensor, vocab: &Vocabulary, k: usize) -> Vec<(String, f64)> {
    if k == 0 {
        return Vec::new();
    }
    let mut scored: Vec<(usize, f64)> = (0..word_table.rows())
        .filter(|&id| !Vocabulary::is_reserved(id))
        .map(|id| (id, crate::numerics::tensor::dot(c.data(), word_table.row(id))))
        .collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    scored
        .into_iter()
        .take(k)
        .map(|(id, s)| (vocab.token(id).unwrap_or("<?>").to_string(), s))
        .collect()
}

/// 1-based rank of `token` in the full readout ordering.
pub fn readout_rank(c: &Tensor, word_table: &Tensor, vocab: &Vocabulary, token: &str) -> Option<usize> {
    let target = vocab.tokens().iter().position(|t| t == token)?;
    if Vocabulary::is_reserved(target) {
        return None;
    }
    let score = |id: usize| crate::numerics::tensor::dot(c.data(), word_table.row(id));
    let ts = score(target);
    let better = (0..word_table.rows())
        .filter(|&id| !Vocabulary::is_reserved(id) && id != target)
        .filter(|&id| {
            let s = score(id);
            s > ts || (s == ts && id < target)
        })
        .count();
    Some(better + 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Document, SentenceExample, Span};
    use crate::encoding::encode_pair;

    fn example() -> (SentenceExample, Vocabulary) {
        let ex = SentenceExample {
            tokens: "winds knocked down power lines causing blackout"
                .split(' ')
                .map(String::from)
                .collect(),
            e1: Span::new(0, 1),
            e2: Span::new(6, 7),
            label: true,
            order_swapped: false,
        };
        let v = Vocabulary::build(
            &[Document {
                doc_id: "d".into(),
                topic_id: "t".into(),
                examples: vec![ex.clone()],
            }],
            1,
        );
        (ex, v)
    }

    fn model(variant: Variant, vocab: usize) -> SemDi {
        let cfg = ModelConfig {
            d: 8,
            heads: 2,
            layers: 1,
            ffn_mult: 2,
            dropout: 0.5,
            vocab_size: vocab,
            max_len: 32,
            tied_encoder: true,
        };
        SemDi::new(cfg, variant, 7).unwrap()
    }

    #[test]
    fn full_forward_shapes() {
        let (ex, v) = example();
        let m = model(Variant::Full, v.len());
        let pair = encode_pair(&ex, &v, MaskedEvent::E2).unwrap();
        let r = m.forward(&pair).unwrap();
        assert_eq!(r.logits.shape(), &[1, 2]);
        assert_eq!(r.inquiry_attention.len(), 2);
        for w in &r.inquiry_attention {
            assert_eq!(w.shape(), &[1, 11]);
            assert!((w.sum() - 1.0).abs() < 1e-9);
        }
        assert!(r.logits.is_finite());
    }

    #[test]
    fn no_sde_has_no_inquiry() {
        let (ex, v) = example();
        let m = model(Variant::NoSde, v.len());
        let pair = encode_pair(&ex, &v, MaskedEvent::E1).unwrap();
        let r = m.forward(&pair).unwrap();
        assert!(r.inquiry_attention.is_empty());
        assert!(r.h.is_none());
        assert_eq!(r.logits.shape(), &[1, 2]);
        assert_eq!(r.z, r.c);
    }

    #[test]
    fn no_ca_single_token_uses_the_event_row() {
        let (ex, v) = example();
        let m = model(Variant::NoCa, v.len());
        let pair = encode_pair(&ex, &v, MaskedEvent::E2).unwrap();
        let r = m.forward(&pair).unwrap();
        let h = r.h.as_ref().unwrap();
        assert_eq!(r.c.data(), h.row(pair.event2_positions[0]));
    }

    #[test]
    fn no_sde_ignores_the_marked_stream() {
        let (ex, v) = example();
        let m = model(Variant::NoSde, v.len());
        let pair = encode_pair(&ex, &v, MaskedEvent::E1).unwrap();
        let mut other = pair.clone();
        for id in other.marked_ids.iter_mut().skip(3) {
            *id = crate::corpus::UNK_ID;
        }
        assert_eq!(m.forward(&pair).unwrap().logits, m.forward(&other).unwrap().logits);
    }

    #[test]
    fn tied_and_untied_layouts() {
        let (_, v) = example();
        let tied = model(Variant::Full, v.len());
        assert_eq!(tied.layout.ca, tied.layout.sde);
        let names = |e: &EncoderParams| -> Vec<String> {
            e.param_ids().iter().map(|&id| tied.params.get(id).name.clone()).collect()
        };
        assert_eq!(names(&tied.layout.ca), names(&tied.layout.sde));
        let mut cfg = tied.config.clone();
        cfg.tied_encoder = false;
        let untied = SemDi::new(cfg, Variant::Full, 7).unwrap();
        assert_ne!(untied.layout.ca, untied.layout.sde);
        assert!(untied.params.len() > tied.params.len());
    }

    #[test]
    fn rebinding_by_name_recovers_layout() {
        let (_, v) = example();
        let m = model(Variant::Full, v.len());
        let again = SemDi::from_params(m.config.clone(), m.variant, m.params.clone()).unwrap();
        assert_eq!(again.layout, m.layout);
        let mut wrong = m.config.clone();
        wrong.layers = 2;
        assert!(SemDi::from_params(wrong, m.variant, m.params.clone()).is_err());
    }

    #[test]
    fn loss_and_prediction_rules() {
        let rec = |l: [f64; 2]| ForwardRecord {
            c: Tensor::zeros(&[1, 1]),
            h: None,
            z: Tensor::zeros(&[1, 1]),
            logits: Tensor::from_rows(&[l.to_vec()]),
            inquiry_attention: vec![],
            mask_pos: 0,
            masked_event: MaskedEvent::E1,
        };
        assert!((loss(&rec([0.0, 0.0]), true).data()[0] - std::f64::consts::LN_2).abs() < 1e-12);
        assert!(loss(&rec([10.0, -10.0]), false).data()[0] < 1e-4);
        assert!(!predict(&rec([2.0, 1.0])));
        assert!(predict(&rec([1.0, 2.0])));
        assert!(!predict(&rec([0.3, 0.3])));
    }

    #[test]
    fn readout_self_similarity_and_empty() {
        let (_, v) = example();
        let m = model(Variant::Full, v.len());
        let table = m.word_table();
        for word in ["winds", "knocked", "causing", "blackout"] {
            let c = Tensor::new(vec![1, 8], table.row(v.id(word)).to_vec()).unwrap();
            let top = readout_fill_in(&c, table, &v, 3);
            assert_eq!(top[0].0, word);
            assert_eq!(readout_rank(&c, table, &v, word), Some(1));
            assert!(top.iter().all(|(t, _)| !crate::corpus::RESERVED.contains(&t.as_str())));
        }
        let c = Tensor::new(vec![1, 8], table.row(v.id("down")).to_vec()).unwrap();
        assert!(readout_fill_in(&c, table, &v, 0).is_empty());
    }
}
