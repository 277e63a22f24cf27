//! Binary checkpoint: magic, version, a JSON header describing the model,
//! then every parameter as little-endian `f64` in header order.
//!
//! ```text
//! b"SEMDICKP" | u32 version | u64 header_len | header JSON | f64 values...
//! ```

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::Vocabulary;
use crate::encoding::MaskingStrategy;
use crate::error::CheckpointError;
use crate::model::ModelConfig;
use crate::numerics::{ParamStore, Tensor};
use crate::pipeline::{SemDi, Variant};

pub const MAGIC: &[u8; 8] = b"SEMDICKP";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    variant: Variant,
    masking_strategy: MaskingStrategy,
    vocab: Vec<String>,
    params: Vec<ParamEntry>,
}

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

/// A trained model with everything needed to run it again.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: SemDi,
    pub vocab: Vocabulary,
    pub masking_strategy: MaskingStrategy,
}

impl Checkpoint {
    pub fn write_to<W: Write>(&self, mut out: W) -> Result<(), CheckpointError> {
        let header = Header {
            model: self.model.config.clone(),
            variant: self.model.variant,
            masking_strategy: self.masking_strategy,
            vocab: self.vocab.tokens().to_vec(),
            params: self
                .model
                .params
                .iter()
                .map(|(_, p)| ParamEntry {
                    name: p.name.clone(),
                    shape: p.value.shape().to_vec(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        out.write_all(MAGIC)?;
        out.write_all(&VERSION.to_le_bytes())?;
        out.write_all(&(json.len() as u64).to_le_bytes())?;
        out.write_all(&json)?;
        for (_, p) in self.model.params.iter() {
            for v in p.value.data() {
                out.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut input: R) -> Result<Self, CheckpointError> {
        let mut magic = [0u8; 8];
        input.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(CheckpointError::Magic);
        }
        let mut word = [0u8; 4];
        input.read_exact(&mut word)?;
        let version = u32::from_le_bytes(word);
        if version != VERSION {
            return Err(CheckpointError::Version(version));
        }
        let mut len = [0u8; 8];
        input.read_exact(&mut len)?;
        let len = u64::from_le_bytes(len) as usize;
        let mut json = vec![0u8; len];
        input.read_exact(&mut json)?;
        let header: Header = serde_json::from_slice(&json)?;

        let mut store = ParamStore::new();
        let mut buf = [0u8; 8];
        for entry in &header.params {
            let n: usize = entry.shape.iter().product();
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                input.read_exact(&mut buf)?;
                data.push(f64::from_le_bytes(buf));
            }
            let t = Tensor::new(entry.shape.clone(), data).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
            store.insert(entry.name.clone(), t);
        }
        let mut rest = Vec::new();
        input.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(CheckpointError::Malformed(format!("{} trailing bytes", rest.len())));
        }
        let vocab = Vocabulary::from_tokens(header.vocab).map_err(CheckpointError::Malformed)?;
        if vocab.len() != header.model.vocab_size {
            return Err(CheckpointError::Malformed("vocabulary size does not match config".into()));
        }
        let model = SemDi::from_params(header.model, header.variant, store)
            .map_err(|e| CheckpointError::Malformed(e.to_string()))?;
        Ok(Self {
            model,
            vocab,
            masking_strategy: header.masking_strategy,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
        let file = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(file);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CheckpointError> {
        let file = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(file))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let vocab = Vocabulary::from_tokens(
            crate::corpus::RESERVED
                .iter()
                .map(|s| s.to_string())
                .chain(["a".into(), "b".into()])
                .collect(),
        )
        .unwrap();
        let cfg = ModelConfig {
            d: 8,
            heads: 2,
            layers: 1,
            ffn_mult: 2,
            dropout: 0.0,
            vocab_size: vocab.len(),
            max_len: 16,
            tied_encoder: true,
        };
        Checkpoint {
            model: SemDi::new(cfg, Variant::NoCa, 3).unwrap(),
            vocab,
            masking_strategy: MaskingStrategy::Event2Only,
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let ck = sample();
        let mut bytes = Vec::new();
        ck.write_to(&mut bytes).unwrap();
        assert_eq!(&bytes[..8], MAGIC);
        let back = Checkpoint::read_from(bytes.as_slice()).unwrap();
        assert_eq!(back, ck);
        let mut again = Vec::new();
        back.write_to(&mut again).unwrap();
        assert_eq!(again, bytes);
    }

    #[test]
    fn rejects_bad_magic_version_and_truncation() {
        let mut bytes = Vec::new();
        sample().write_to(&mut bytes).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::read_from(bad.as_slice()), Err(CheckpointError::Magic)));
        let mut v2 = bytes.clone();
        v2[8] = 2;
        assert!(matches!(Checkpoint::read_from(v2.as_slice()), Err(CheckpointError::Version(2))));
        assert!(Checkpoint::read_from(&bytes[..bytes.len() - 3]).is_err());
    }
}
