//! Marked and cloze-masked id sequences for one event pair.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{
    SentenceExample, Vocabulary, E1_CLOSE, E1_CLOSE_ID, E1_OPEN, E1_OPEN_ID, E2_CLOSE, E2_CLOSE_ID, E2_OPEN,
    E2_OPEN_ID, MASK_ID,
};
use crate::error::ModelError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MaskedEvent {
    E1,
    E2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskingStrategy {
    Random,
    #[serde(rename = "e1")]
    Event1Only,
    #[serde(rename = "e2")]
    Event2Only,
}

impl std::str::FromStr for MaskingStrategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "random" => Ok(Self::Random),
            "e1" => Ok(Self::Event1Only),
            "e2" => Ok(Self::Event2Only),
            other => Err(format!("unknown masking strategy {other:?} (random|e1|e2)")),
        }
    }
}

/// Random draws a fair coin from `rng`; the fixed strategies ignore it.
pub fn choose_mask<R: Rng>(strategy: MaskingStrategy, rng: &mut R) -> MaskedEvent {
    match strategy {
        MaskingStrategy::Event1Only => MaskedEvent::E1,
        MaskingStrategy::Event2Only => MaskedEvent::E2,
        MaskingStrategy::Random => {
            if rng.gen_bool(0.5) {
                MaskedEvent::E1
            } else {
                MaskedEvent::E2
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncodedPair {
    /// Sentence with `<e1>…</e1>` and `<e2>…</e2>` inserted; length n+4.
    pub marked_ids: Vec<usize>,
    /// Marked sentence with the masked event and its two markers collapsed
    /// to one `<MASK>`; length n+3 minus the span length.
    pub masked_ids: Vec<usize>,
    pub mask_pos: usize,
    pub masked_event: MaskedEvent,
    /// Content-token positions of each event inside `marked_ids`.
    pub event1_positions: Vec<usize>,
    pub event2_positions: Vec<usize>,
    pub label: bool,
}

impl EncodedPair {
    /// Positions in `marked_ids` of the event that was masked.
    pub fn masked_event_positions(&self) -> &[usize] {
        match self.masked_event {
            MaskedEvent::E1 => &self.event1_positions,
            MaskedEvent::E2 => &self.event2_positions,
        }
    }
}

/// Surface strings of the marked sentence, aligned with `marked_ids`.
pub fn marked_tokens(ex: &SentenceExample) -> Vec<String> {
    let mut out = Vec::with_capacity(ex.tokens.len() + 4);
    for (i, t) in ex.tokens.iter().enumerate() {
        if i == ex.e1.start {
            out.push(E1_OPEN.to_string());
        }
        if i == ex.e2.start {
            out.push(E2_OPEN.to_string());
        }
        out.push(t.clone());
        if i + 1 == ex.e1.end {
            out.push(E1_CLOSE.to_string());
        }
        if i + 1 == ex.e2.end {
            out.push(E2_CLOSE.to_string());
        }
    }
    out
}

pub fn encode_pair(
    ex: &SentenceExample,
    vocab: &Vocabulary,
    masked_event: MaskedEvent,
) -> Result<EncodedPair, ModelError> {
    let n = ex.tokens.len();
    let (e1, e2) = (ex.e1, ex.e2);
    if e1.is_empty() || e2.is_empty() || e1.end > n || e2.end > n || e1.overlaps(&e2) || e2.start < e1.start {
        return Err(ModelError::Internal(format!(
            "invalid event spans {:?}/{:?} for {n} tokens",
            <[usize; 2]>::from(e1),
            <[usize; 2]>::from(e2)
        )));
    }
    let ids: Vec<usize> = ex.tokens.iter().map(|t| vocab.id(t)).collect();

    let mut marked_ids = Vec::with_capacity(n + 4);
    let mut event1_positions = Vec::with_capacity(e1.len());
    let mut event2_positions = Vec::with_capacity(e2.len());
    for (i, &id) in ids.iter().enumerate() {
        if i == e1.start {
            marked_ids.push(E1_OPEN_ID);
        }
        if i == e2.start {
            marked_ids.push(E2_OPEN_ID);
        }
        if e1.contains(i) {
            event1_positions.push(marked_ids.len());
        } else if e2.contains(i) {
            event2_positions.push(marked_ids.len());
        }
        marked_ids.push(id);
        if i + 1 == e1.end {
            marked_ids.push(E1_CLOSE_ID);
        }
        if i + 1 == e2.end {
            marked_ids.push(E2_CLOSE_ID);
        }
    }

    // The masked event loses its markers; the other event keeps them.
    let (open, close) = match masked_event {
        MaskedEvent::E1 => (E1_OPEN_ID, E1_CLOSE_ID),
        MaskedEvent::E2 => (E2_OPEN_ID, E2_CLOSE_ID),
    };
    let start = marked_ids.iter().position(|&i| i == open).expect("marker inserted");
    let end = marked_ids.iter().position(|&i| i == close).expect("marker inserted");
    let mut masked_ids = Vec::with_capacity(marked_ids.len() - (end - start));
    masked_ids.extend_from_slice(&marked_ids[..start]);
    let mask_pos = masked_ids.len();
    masked_ids.push(MASK_ID);
    masked_ids.extend_from_slice(&marked_ids[end + 1..]);

    Ok(EncodedPair {
        marked_ids,
        masked_ids,
        mask_pos,
        masked_event,
        event1_positions,
        event2_positions,
        label: ex.label,
    })
}
