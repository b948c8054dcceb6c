//! Binary checkpoint: model parameters plus the vocabulary they were trained
//! against.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"KESACKPT"  u32 version
//! u64 n, n bytes   JSON header {model, vocab_fingerprint, config_fingerprint, training}
//! u64 count, then per token:  u32 len, UTF-8 bytes
//! u64 count, then per tensor: u32 len, name, u32 rank, rank × u64 extent, f64 values
//! ```

use std::io::{self, Read, Write};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::{KesaModel, ModelConfig, ModelError};
use crate::corpus::Vocabulary;
use crate::diffgraph::{ParamStore, Tensor};

const MAGIC: &[u8; 8] = b"KESACKPT";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("not a checkpoint (bad magic)")]
    Magic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("corrupt header: {0}")]
    Header(String),
    #[error("fingerprint mismatch for {what}: header {expected}, computed {actual}")]
    Fingerprint {
        what: &'static str,
        expected: String,
        actual: String,
    },
    #[error("vocabulary holds {actual} tokens but model expects {expected}")]
    VocabSize { expected: usize, actual: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    model: ModelConfig,
    vocab_fingerprint: String,
    config_fingerprint: String,
    training: serde_json::Value,
}

/// A trained model with its vocabulary and the run configuration that
/// produced it.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: KesaModel,
    pub vocab: Vocabulary,
    pub training: serde_json::Value,
}

fn config_fingerprint(model: &ModelConfig, training: &serde_json::Value) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(model).expect("serializable"));
    h.update(serde_json::to_vec(training).expect("serializable"));
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

impl Checkpoint {
    pub fn config_fingerprint(&self) -> String {
        config_fingerprint(&self.model.config(), &self.training)
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<(), CheckpointError> {
        let header = Header {
            model: self.model.config(),
            vocab_fingerprint: self.vocab.fingerprint(),
            config_fingerprint: self.config_fingerprint(),
            training: self.training.clone(),
        };
        let header = serde_json::to_vec(&header).map_err(|e| CheckpointError::Header(e.to_string()))?;
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(header.len() as u64).to_le_bytes())?;
        w.write_all(&header)?;

        w.write_all(&(self.vocab.len() as u64).to_le_bytes())?;
        for t in self.vocab.tokens() {
            write_str(&mut w, t)?;
        }

        let store = self.model.params();
        w.write_all(&(store.len() as u64).to_le_bytes())?;
        for (_, name, t) in store.iter() {
            write_str(&mut w, name)?;
            w.write_all(&(t.rank() as u32).to_le_bytes())?;
            for &e in t.shape() {
                w.write_all(&(e as u64).to_le_bytes())?;
            }
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to memory");
        buf
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self, CheckpointError> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(CheckpointError::Magic);
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(CheckpointError::Version(version));
        }
        let n = read_len(&mut r)?;
        let mut raw = vec![0u8; n];
        r.read_exact(&mut raw)?;
        let header: Header = serde_json::from_slice(&raw).map_err(|e| CheckpointError::Header(e.to_string()))?;

        let count = read_len(&mut r)?;
        let tokens = (0..count).map(|_| read_str(&mut r)).collect::<Result<Vec<_>, _>>()?;
        let vocab = Vocabulary::from_tokens(tokens);
        let actual = vocab.fingerprint();
        if actual != header.vocab_fingerprint {
            return Err(CheckpointError::Fingerprint {
                what: "vocabulary",
                expected: header.vocab_fingerprint,
                actual,
            });
        }
        if vocab.len() != header.model.vocab_size {
            return Err(CheckpointError::VocabSize {
                expected: header.model.vocab_size,
                actual: vocab.len(),
            });
        }
        let actual = config_fingerprint(&header.model, &header.training);
        if actual != header.config_fingerprint {
            return Err(CheckpointError::Fingerprint {
                what: "config",
                expected: header.config_fingerprint,
                actual,
            });
        }

        let count = read_len(&mut r)?;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let name = read_str(&mut r)?;
            let rank = read_u32(&mut r)? as usize;
            if rank == 0 || rank > 4 {
                return Err(CheckpointError::Header(format!("tensor `{name}` has rank {rank}")));
            }
            let shape = (0..rank).map(|_| read_len(&mut r)).collect::<Result<Vec<_>, _>>()?;
            let numel = shape.iter().try_fold(1usize, |a, &e| a.checked_mul(e));
            let numel = numel
                .filter(|&n| n <= 1 << 32)
                .ok_or_else(|| CheckpointError::Header(format!("tensor `{name}` too large")))?;
            let mut bytes = vec![0u8; numel * 8];
            r.read_exact(&mut bytes)?;
            let data = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| CheckpointError::Header(e.to_string()))?;
            if name == "embedding" || name == "polarity_embedding" {
                store.add_table(name, t);
            } else {
                store.add(name, t);
            }
        }
        let model = KesaModel::from_store(header.model, store)?;
        Ok(Self {
            model,
            vocab,
            training: header.training,
        })
    }
}

fn write_str<W: Write>(w: &mut W, s: &str) -> io::Result<()> {
    w.write_all(&(s.len() as u32).to_le_bytes())?;
    w.write_all(s.as_bytes())
}

fn read_u32<R: Read>(r: &mut R) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_len<R: Read>(r: &mut R) -> Result<usize, CheckpointError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    usize::try_from(u64::from_le_bytes(b)).map_err(|_| CheckpointError::Header("length overflow".into()))
}

fn read_str<R: Read>(r: &mut R) -> Result<String, CheckpointError> {
    let n = read_u32(r)? as usize;
    let mut b = vec![0u8; n];
    r.read_exact(&mut b)?;
    String::from_utf8(b).map_err(|_| CheckpointError::Header("non-UTF-8 string".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::LabeledSentence;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample() -> Checkpoint {
        let vocab = Vocabulary::build(
            &[LabeledSentence {
                tokens: vec!["good".into(), "film".into()],
                label: 1,
            }],
            1,
        );
        let cfg = ModelConfig {
            vocab_size: vocab.len(),
            dim: 3,
            classes: 2,
        };
        Checkpoint {
            model: KesaModel::init(cfg, &mut ChaCha8Rng::seed_from_u64(1)),
            vocab,
            training: serde_json::json!({"gamma": 0.1}),
        }
    }

    #[test]
    fn round_trips_bit_exactly() {
        let ck = sample();
        let bytes = ck.to_bytes();
        let back = Checkpoint::read_from(bytes.as_slice()).unwrap();
        assert_eq!(back.vocab, ck.vocab);
        assert_eq!(back.training, ck.training);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn rejects_tampering() {
        let bytes = sample().to_bytes();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::read_from(bad.as_slice()), Err(CheckpointError::Magic)));

        // Flip one byte inside the first vocabulary token.
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let first_token = 20 + header_len + 8 + 4;
        let mut bad = bytes.clone();
        bad[first_token] ^= 1;
        assert!(matches!(
            Checkpoint::read_from(bad.as_slice()),
            Err(CheckpointError::Fingerprint { what: "vocabulary", .. })
        ));

        assert!(Checkpoint::read_from(&bytes[..bytes.len() - 3]).is_err());
    }

    #[test]
    fn rejects_shape_mismatch() {
        let ck = sample();
        let mut store = ck.model.params().clone();
        let id = store.find("main.bias").unwrap();
        *store.get_mut(id) = Tensor::vector(vec![0.0; 3]);
        let cfg = ck.model.config();
        // Bypass from_store validation by writing the tensors by hand.
        let mut buf = Vec::new();
        let header = Header {
            model: cfg,
            vocab_fingerprint: ck.vocab.fingerprint(),
            config_fingerprint: config_fingerprint(&cfg, &ck.training),
            training: ck.training.clone(),
        };
        let header = serde_json::to_vec(&header).unwrap();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
        buf.extend_from_slice(&header);
        buf.extend_from_slice(&(ck.vocab.len() as u64).to_le_bytes());
        for t in ck.vocab.tokens() {
            write_str(&mut buf, t).unwrap();
        }
        buf.extend_from_slice(&(store.len() as u64).to_le_bytes());
        for (_, name, t) in store.iter() {
            write_str(&mut buf, name).unwrap();
            buf.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &e in t.shape() {
                buf.extend_from_slice(&(e as u64).to_le_bytes());
            }
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        assert!(matches!(
            Checkpoint::read_from(buf.as_slice()),
            Err(CheckpointError::Model(ModelError::Shape { .. }))
        ));
    }
}
