//! Inquiry attention of one example as data: JSON plus an aligned text grid.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::corpus::{SentenceExample, Vocabulary};
use crate::encoding::{encode_pair, marked_tokens, MaskedEvent};
use crate::error::ModelError;
use crate::pipeline::{predict, SemDi, Variant};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapExport {
    /// Marked sentence, markers included.
    pub tokens: Vec<String>,
    /// One row per head, one column per token.
    pub weights: Vec<Vec<f64>>,
    pub masked_event: MaskedEvent,
    pub prediction: bool,
    pub gold: bool,
}

/// Runs one dropout-free forward pass and collects the inquiry weights.
pub fn export(
    model: &SemDi,
    vocab: &Vocabulary,
    ex: &SentenceExample,
    masked_event: MaskedEvent,
) -> Result<HeatmapExport, ModelError> {
    if model.variant == Variant::NoSde {
        return Err(ModelError::Config("variant has no inquiry attention".into()));
    }
    let pair = encode_pair(ex, vocab, masked_event)?;
    let record = model.forward(&pair)?;
    Ok(HeatmapExport {
        tokens: marked_tokens(ex),
        weights: record.inquiry_attention.iter().map(|w| w.data().to_vec()).collect(),
        masked_event,
        prediction: predict(&record),
        gold: ex.label,
    })
}

impl HeatmapExport {
    /// Tokens as column headers, one row per head, weights to 3 decimals.
    /// Cells are rounded by largest remainder, so a row that sums to 1
    /// also prints as summing to exactly 1.000.
    pub fn render_grid(&self) -> String {
        let widths: Vec<usize> = self.tokens.iter().map(|t| t.chars().count().max(5)).collect();
        let mut out = String::new();
        let _ = write!(out, "{:<4}", "");
        for (t, w) in self.tokens.iter().zip(&widths) {
            let _ = write!(out, " {t:>w$}");
        }
        out.push('\n');
        for (h, row) in self.weights.iter().enumerate() {
            let _ = write!(out, "{:<4}", format!("h{h}"));
            for (v, w) in thousandths(row).iter().zip(&widths) {
                let _ = write!(out, " {:>w$}", format!("{}.{:03}", v / 1000, v % 1000));
            }
            out.push('\n');
        }
        out
    }

    /// Mean weight over heads for each column.
    pub fn mean_over_heads(&self) -> Vec<f64> {
        let n = self.tokens.len();
        let mut mean = vec![0.0; n];
        for row in &self.weights {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v / self.weights.len() as f64;
            }
        }
        mean
    }
}

/// Rounds to integer thousandths preserving the rounded row total.
fn thousandths(row: &[f64]) -> Vec<u64> {
    let scaled: Vec<f64> = row.iter().map(|v| v.max(0.0) * 1000.0).collect();
    let mut cells: Vec<u64> = scaled.iter().map(|v| v.floor() as u64).collect();
    let target = scaled.iter().sum::<f64>().round() as u64;
    let mut order: Vec<usize> = (0..row.len()).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (scaled[a] - scaled[a].floor(), scaled[b] - scaled[b].floor());
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    let short = target.saturating_sub(cells.iter().sum());
    for &i in order.iter().take(short as usize) {
        cells[i] += 1;
    }
    cells
}
