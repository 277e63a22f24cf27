//! Event causality identification by semantic dependency inquiry: a cloze
//! pass over the masked sentence produces a fill-in token, which then
//! queries the encoded marked sentence through cross-attention.

pub mod checkpoint;
pub mod corpus;
pub mod encoding;
pub mod error;
pub mod evaluation;
pub mod gradcheck;
pub mod heatmap;
pub mod model;
pub mod numerics;
pub mod pipeline;
pub mod synthetic;
pub mod training;

use sha2::{Digest, Sha256};

/// Hex SHA-256 of `bytes`.
pub fn fingerprint(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Independent sub-seed for `stream`, mixed with splitmix64 so nearby
/// streams do not produce correlated generators.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
