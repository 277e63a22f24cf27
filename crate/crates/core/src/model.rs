//! Shared encoder: word + sinusoidal position embeddings, multi-head
//! attention, and the post-norm transformer stack.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::ModelError;
use crate::numerics::{Graph, ParamId, ParamStore, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Model width.
    pub d: usize,
    pub heads: usize,
    pub layers: usize,
    pub ffn_mult: usize,
    pub dropout: f64,
    pub vocab_size: usize,
    pub max_len: usize,
    /// Cloze pass and dependency pass share one encoder stack.
    pub tied_encoder: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 128,
            heads: 4,
            layers: 2,
            ffn_mult: 4,
            dropout: 0.1,
            vocab_size: 0,
            max_len: 128,
            tied_encoder: true,
        }
    }
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.d == 0 || self.heads == 0 || !self.d.is_multiple_of(self.heads) {
            return Err(ModelError::Config(format!(
                "width {} must be a positive multiple of heads {}",
                self.d, self.heads
            )));
        }
        if self.ffn_mult == 0 {
            return Err(ModelError::Config("ffn_mult must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ModelError::Config(format!("dropout {} outside [0,1)", self.dropout)));
        }
        if self.vocab_size < crate::corpus::RESERVED.len() {
            return Err(ModelError::Config(format!("vocab_size {} too small", self.vocab_size)));
        }
        if self.max_len == 0 {
            return Err(ModelError::Config("max_len must be positive".into()));
        }
        Ok(())
    }
}

/// `PE(pos, 2i) = sin(pos / 10000^(2i/d))`, `PE(pos, 2i+1) = cos(·)`.
pub fn position_encoding(pos: usize, dim: usize, d: usize) -> f64 {
    let pair = (dim / 2) as f64;
    let angle = pos as f64 / 10000f64.powf(2.0 * pair / d as f64);
    if dim.is_multiple_of(2) {
        angle.sin()
    } else {
        angle.cos()
    }
}

pub fn position_table(max_len: usize, d: usize) -> Tensor {
    let mut t = Tensor::zeros(&[max_len, d]);
    for pos in 0..max_len {
        for (dim, v) in t.row_mut(pos).iter_mut().enumerate() {
            *v = position_encoding(pos, dim, d);
        }
    }
    t
}

/// Per-head projections plus the output projection of one attention block.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionParams {
    pub q: Vec<ParamId>,
    pub k: Vec<ParamId>,
    pub v: Vec<ParamId>,
    pub out: ParamId,
}

impl AttentionParams {
    pub fn init<R: Rng>(store: &mut ParamStore, prefix: &str, d: usize, heads: usize, rng: &mut R) -> Self {
        let dh = d / heads;
        let scale = 1.0 / (d as f64).sqrt();
        let mut proj = |kind: &str, rng: &mut R| -> Vec<ParamId> {
            (0..heads)
                .map(|h| store.insert_uniform(format!("{prefix}.{kind}.h{h}"), &[d, dh], scale, rng))
                .collect()
        };
        let q = proj("q", rng);
        let k = proj("k", rng);
        let v = proj("v", rng);
        let out = store.insert_uniform(format!("{prefix}.out"), &[d, d], scale, rng);
        Self { q, k, v, out }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncoderLayerParams {
    pub attn: AttentionParams,
    pub ln1_gain: ParamId,
    pub ln1_bias: ParamId,
    pub ffn_w1: ParamId,
    pub ffn_b1: ParamId,
    pub ffn_w2: ParamId,
    pub ffn_b2: ParamId,
    pub ln2_gain: ParamId,
    pub ln2_bias: ParamId,
}

/// Handles for one transformer stack.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncoderParams {
    pub layers: Vec<EncoderLayerParams>,
}

impl EncoderParams {
    pub fn init<R: Rng>(store: &mut ParamStore, prefix: &str, cfg: &ModelConfig, rng: &mut R) -> Self {
        let d = cfg.d;
        let hidden = cfg.ffn_mult * d;
        let layers = (0..cfg.layers)
            .map(|l| {
                let p = format!("{prefix}.l{l}");
                let attn = AttentionParams::init(store, &format!("{p}.attn"), d, cfg.heads, rng);
                let ln1_gain = store.insert(format!("{p}.ln1.gain"), Tensor::full(&[1, d], 1.0));
                let ln1_bias = store.insert(format!("{p}.ln1.bias"), Tensor::zeros(&[1, d]));
                let ffn_w1 =
                    store.insert_uniform(format!("{p}.ffn.w1"), &[d, hidden], 1.0 / (d as f64).sqrt(), rng);
                let ffn_b1 = store.insert(format!("{p}.ffn.b1"), Tensor::zeros(&[1, hidden]));
                let ffn_w2 = store.insert_uniform(
                    format!("{p}.ffn.w2"),
                    &[hidden, d],
                    1.0 / (hidden as f64).sqrt(),
                    rng,
                );
                let ffn_b2 = store.insert(format!("{p}.ffn.b2"), Tensor::zeros(&[1, d]));
                let ln2_gain = store.insert(format!("{p}.ln2.gain"), Tensor::full(&[1, d], 1.0));
                let ln2_bias = store.insert(format!("{p}.ln2.bias"), Tensor::zeros(&[1, d]));
                EncoderLayerParams {
                    attn,
                    ln1_gain,
                    ln1_bias,
                    ffn_w1,
                    ffn_b1,
                    ffn_w2,
                    ffn_b2,
                    ln2_gain,
                    ln2_bias,
                }
            })
            .collect();
        Self { layers }
    }

    /// Every parameter handle in the stack, in registration order.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for l in &self.layers {
            ids.extend(l.attn.q.iter().chain(&l.attn.k).chain(&l.attn.v));
            ids.extend([
                l.attn.out, l.ln1_gain, l.ln1_bias, l.ffn_w1, l.ffn_b1, l.ffn_w2, l.ffn_b2, l.ln2_gain,
                l.ln2_bias,
            ]);
        }
        ids
    }
}

/// Output of [`mha`]: the projected result and each head's softmax weights.
pub struct Attended {
    pub output: Var,
    pub weights: Vec<Var>,
}

/// Runs per-step dropout with its own generator; `None` disables dropout.
pub struct Dropout<'a, R> {
    pub rate: f64,
    pub rng: Option<&'a mut R>,
}

impl<R: Rng> Dropout<'_, R> {
    pub fn apply(&mut self, g: &mut Graph<'_>, x: Var) -> Result<Var, ModelError> {
        match self.rng.as_deref_mut() {
            Some(rng) => Ok(g.dropout(x, self.rate, rng, true)?),
            None => Ok(x),
        }
    }
}

/// `word_table[ids[t]] + PE(t)` for every position.
pub fn embed(
    g: &mut Graph<'_>,
    cfg: &ModelConfig,
    word: ParamId,
    positions: &Tensor,
    ids: &[usize],
) -> Result<Var, ModelError> {
    if ids.len() > cfg.max_len || ids.len() > positions.rows() {
        return Err(ModelError::Encoding(format!(
            "sequence length {} exceeds max_len {}",
            ids.len(),
            cfg.max_len
        )));
    }
    if let Some(&bad) = ids.iter().find(|&&i| i >= cfg.vocab_size) {
        return Err(ModelError::Encoding(format!(
            "token id {bad} out of range for vocabulary of {}",
            cfg.vocab_size
        )));
    }
    let table = g.param(word);
    let words = g.gather_rows(table, ids)?;
    let pe = Tensor::new(
        vec![ids.len(), cfg.d],
        positions.data()[..ids.len() * cfg.d].to_vec(),
    )?;
    let pe = g.constant(pe);
    Ok(g.add(words, pe)?)
}

/// Multi-head attention with queries from `a` and keys/values from `b`.
/// Keys with `keep[j] == false` receive zero weight.
pub fn mha(
    g: &mut Graph<'_>,
    a: Var,
    b: Var,
    params: &AttentionParams,
    keep: Option<&[bool]>,
) -> Result<Attended, ModelError> {
    let (da, db) = (g.value(a).cols(), g.value(b).cols());
    let d = g.store().value(params.out).rows();
    if da != d || db != d {
        return Err(crate::error::NumericError::Shape {
            op: "mha",
            left: g.value(a).shape().to_vec(),
            right: g.value(b).shape().to_vec(),
        }
        .into());
    }
    let heads = params.q.len();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let (wq, wk, wv) = (g.param(params.q[h]), g.param(params.k[h]), g.param(params.v[h]));
        let q = g.matmul(a, wq)?;
        let k = g.matmul(b, wk)?;
        let v = g.matmul(b, wv)?;
        let scores = g.matmul_t(q, k)?;
        let scores = g.scale(scores, scale)?;
        let w = g.softmax_rows(scores, keep)?;
        outs.push(g.matmul(w, v)?);
        weights.push(w);
    }
    let cat = if heads == 1 { outs[0] } else { g.concat_cols(&outs)? };
    let wo = g.param(params.out);
    let output = g.matmul(cat, wo)?;
    Ok(Attended { output, weights })
}

/// Post-norm transformer stack. Zero layers is the identity.
pub fn encoder_forward<R: Rng>(
    g: &mut Graph<'_>,
    x: Var,
    enc: &EncoderParams,
    keep: Option<&[bool]>,
    dropout: &mut Dropout<'_, R>,
) -> Result<Var, ModelError> {
    let mut h = x;
    for l in &enc.layers {
        let att = mha(g, h, h, &l.attn, keep)?;
        let att = dropout.apply(g, att.output)?;
        let sum = g.add(h, att)?;
        let (g1, b1) = (g.param(l.ln1_gain), g.param(l.ln1_bias));
        let normed = g.layer_norm(sum, g1, b1)?;

        let w1 = g.param(l.ffn_w1);
        let b1f = g.param(l.ffn_b1);
        let w2 = g.param(l.ffn_w2);
        let b2f = g.param(l.ffn_b2);
        let f = g.matmul(normed, w1)?;
        let f = g.add_row(f, b1f)?;
        let f = g.relu(f)?;
        let f = g.matmul(f, w2)?;
        let f = g.add_row(f, b2f)?;
        let f = dropout.apply(g, f)?;
        let sum = g.add(normed, f)?;
        let (g2, b2) = (g.param(l.ln2_gain), g.param(l.ln2_bias));
        h = g.layer_norm(sum, g2, b2)?;
    }
    Ok(h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn no_dropout<'a>() -> Dropout<'a, ChaCha8Rng> {
        Dropout { rate: 0.0, rng: None }
    }

    fn cfg(d: usize, heads: usize, layers: usize) -> ModelConfig {
        ModelConfig {
            d,
            heads,
            layers,
            ffn_mult: 2,
            dropout: 0.0,
            vocab_size: 20,
            max_len: 16,
            tied_encoder: true,
        }
    }

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn config_rejects_indivisible_width() {
        assert!(cfg(10, 3, 1).validate().is_err());
        assert!(cfg(8, 2, 1).validate().is_ok());
        assert_eq!(cfg(8, 2, 1).head_dim(), 4);
    }

    #[test]
    fn position_zero_is_sin0_cos0() {
        for dim in 0..8 {
            let expected = if dim % 2 == 0 { 0.0 } else { 1.0 };
            assert_eq!(position_encoding(0, dim, 8), expected);
        }
        let t = position_table(4, 6);
        assert!((t.get(1, 0) - 1f64.sin()).abs() < 1e-15);
        assert!((t.get(1, 3) - (1.0 / 10000f64.powf(2.0 / 6.0)).cos()).abs() < 1e-15);
    }

    #[test]
    fn embedding_rows_differ_by_position_code() {
        let c = cfg(8, 2, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let word = store.insert_uniform("w", &[c.vocab_size, c.d], 0.3, &mut rng);
        let pe = position_table(c.max_len, c.d);
        let mut g = Graph::new(&store);
        let ids = [9, 7, 3, 4, 5, 7, 11, 12, 13, 14, 15];
        let x = embed(&mut g, &c, word, &pe, &ids).unwrap();
        let xv = g.value(x);
        assert_eq!(xv.shape(), &[11, 8]);
        for dim in 0..8 {
            let diff = xv.get(1, dim) - xv.get(5, dim);
            let pe_diff = pe.get(1, dim) - pe.get(5, dim);
            assert!((diff - pe_diff).abs() < 1e-12);
        }
        assert!(matches!(embed(&mut g, &c, word, &pe, &[20]), Err(ModelError::Encoding(_))));
        assert!(matches!(embed(&mut g, &c, word, &pe, &[1; 17]), Err(ModelError::Encoding(_))));
    }

    #[test]
    fn zero_query_key_weights_average_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let attn = AttentionParams::init(&mut store, "a", 4, 1, &mut rng);
        store.get_mut(attn.q[0]).value = Tensor::zeros(&[4, 4]);
        store.get_mut(attn.k[0]).value = Tensor::zeros(&[4, 4]);
        let mut eye = Tensor::zeros(&[4, 4]);
        for i in 0..4 {
            eye.data_mut()[i * 4 + i] = 1.0;
        }
        store.get_mut(attn.v[0]).value = eye.clone();
        store.get_mut(attn.out).value = eye;
        let mut g = Graph::new(&store);
        let a = g.constant(random(&[2, 4], &mut rng));
        let bt = random(&[5, 4], &mut rng);
        let b = g.constant(bt.clone());
        let keep = [true, true, false, true, false];
        let out = mha(&mut g, a, b, &attn, Some(&keep)).unwrap();
        let w = g.value(out.weights[0]);
        for r in 0..2 {
            for j in 0..5 {
                let expect = if keep[j] { 1.0 / 3.0 } else { 0.0 };
                assert!((w.get(r, j) - expect).abs() < 1e-15);
            }
        }
        let o = g.value(out.output);
        for c in 0..4 {
            let mean = (bt.get(0, c) + bt.get(1, c) + bt.get(3, c)) / 3.0;
            assert!((o.get(0, c) - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn mha_matches_per_head_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let attn = AttentionParams::init(&mut store, "a", 4, 2, &mut rng);
        let at = random(&[3, 4], &mut rng);
        let bt = random(&[5, 4], &mut rng);
        let mut g = Graph::new(&store);
        let (a, b) = (g.constant(at.clone()), g.constant(bt.clone()));
        let got = mha(&mut g, a, b, &attn, None).unwrap();
        let got = g.value(got.output).clone();

        // scalar loops only, no matrix helpers
        let proj = |x: &Tensor, w: &Tensor, r: usize, c: usize| -> f64 {
            (0..4).map(|p| x.get(r, p) * w.get(p, c)).sum()
        };
        let mut concat = vec![vec![0.0; 4]; 3];
        for h in 0..2 {
            let (wq, wk, wv) = (store.value(attn.q[h]), store.value(attn.k[h]), store.value(attn.v[h]));
            for i in 0..3 {
                let mut logits = [0.0; 5];
                for (j, l) in logits.iter_mut().enumerate() {
                    *l = (0..2).map(|c| proj(&at, wq, i, c) * proj(&bt, wk, j, c)).sum::<f64>() / 2f64.sqrt();
                }
                let m = logits.iter().cloned().fold(f64::MIN, f64::max);
                let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
                for c in 0..2 {
                    concat[i][h * 2 + c] =
                        (0..5).map(|j| (logits[j] - m).exp() / z * proj(&bt, wv, j, c)).sum();
                }
            }
        }
        let wo = store.value(attn.out);
        for i in 0..3 {
            for c in 0..4 {
                let expect: f64 = (0..4).map(|p| concat[i][p] * wo.get(p, c)).sum();
                assert!((got.get(i, c) - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mha_width_mismatch_is_shape_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let attn = AttentionParams::init(&mut store, "a", 4, 2, &mut rng);
        let mut g = Graph::new(&store);
        let a = g.constant(Tensor::zeros(&[1, 4]));
        let b = g.constant(Tensor::zeros(&[3, 6]));
        assert!(matches!(
            mha(&mut g, a, b, &attn, None),
            Err(ModelError::Numeric(crate::error::NumericError::Shape { .. }))
        ));
    }

    #[test]
    fn encoder_keeps_shape_and_zero_layers_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let c = cfg(8, 2, 2);
        let enc = EncoderParams::init(&mut store, "enc", &c, &mut rng);
        let empty = EncoderParams { layers: vec![] };
        let xt = random(&[6, 8], &mut rng);
        let mut g = Graph::new(&store);
        let x = g.constant(xt.clone());
        let h = encoder_forward(&mut g, x, &enc, None, &mut no_dropout()).unwrap();
        assert_eq!(g.value(h).shape(), &[6, 8]);
        let id = encoder_forward(&mut g, x, &empty, None, &mut no_dropout()).unwrap();
        assert_eq!(g.value(id), &xt);
    }

    #[test]
    fn self_attention_is_permutation_equivariant_without_positions() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut store = ParamStore::new();
        let enc = EncoderParams::init(&mut store, "enc", &cfg(8, 2, 2), &mut rng);
        let xt = random(&[5, 8], &mut rng);
        let mut swapped = xt.clone();
        swapped.row_mut(1).copy_from_slice(xt.row(3));
        swapped.row_mut(3).copy_from_slice(xt.row(1));
        let mut g = Graph::new(&store);
        let (x, y) = (g.constant(xt), g.constant(swapped));
        let keep = [true, true, true, true, false];
        let hx = encoder_forward(&mut g, x, &enc, Some(&keep), &mut no_dropout()).unwrap();
        let hy = encoder_forward(&mut g, y, &enc, Some(&keep), &mut no_dropout()).unwrap();
        let (hx, hy) = (g.value(hx), g.value(hy));
        for (a, b) in [(0, 0), (1, 3), (3, 1), (2, 2)] {
            for c in 0..8 {
                assert!((hx.get(a, c) - hy.get(b, c)).abs() < 1e-12);
            }
        }
    }
}
