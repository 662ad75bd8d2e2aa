//! Binary model checkpoints.
//!
//! Layout, all little-endian:
//!
//! ```text
//! magic        11 bytes  "SIMPLEXCKPT"
//! version      u8        1
//! dim          u32
//! num_users    u32
//! num_items    u32
//! history_len  u32
//! aggregation  u8        0 average_pooling, 1 self_attention, 2 user_attention
//! similarity   u8        0 cosine, 1 dot
//! flags        u8        bit 0: exclude_target
//! g            f64
//! cosine_eps   f64
//! tensors      f32 row-major: user_emb, item_emb (incl. padding row), V, q, W1, b1, W2, b2
//! ```

use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::encoder::{Aggregation, EncoderConfig, ModelParams, Similarity, Tensor};

pub const MAGIC: &[u8; 11] = b"SIMPLEXCKPT";
pub const FORMAT_VERSION: u8 = 1;
const HEADER_LEN: usize = 11 + 1 + 4 * 4 + 3 + 8 * 2;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint (bad magic string)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u8),
    #[error("checkpoint is {got} bytes, header implies {expected}")]
    Length { expected: usize, got: usize },
    #[error("corrupt header field {0}")]
    BadHeader(&'static str),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub encoder: EncoderConfig,
    pub history_len: usize,
    pub params: ModelParams<f32>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let p = &self.params;
        let n_floats: usize = Tensor::ALL.iter().map(|&t| p.tensor(t).len()).sum();
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * n_floats);
        out.extend_from_slice(MAGIC);
        out.push(FORMAT_VERSION);
        for v in [p.dim, p.num_users, p.num_items, self.history_len] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out.push(self.encoder.aggregation.code());
        out.push(self.encoder.similarity.code());
        out.push(self.encoder.exclude_target as u8);
        out.extend_from_slice(&self.encoder.g.to_le_bytes());
        out.extend_from_slice(&self.encoder.cosine_eps.to_le_bytes());
        for t in Tensor::ALL {
            for &x in p.tensor(t) {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        if bytes.len() < HEADER_LEN {
            return Err(CheckpointError::Length {
                expected: HEADER_LEN,
                got: bytes.len(),
            });
        }
        let version = bytes[11];
        if version != FORMAT_VERSION {
            return Err(CheckpointError::UnsupportedVersion(version));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
        let f64_at = |o: usize| f64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
        let dim = u32_at(12);
        let num_users = u32_at(16);
        let num_items = u32_at(20);
        let history_len = u32_at(24);
        let aggregation = Aggregation::from_code(bytes[28]).ok_or(CheckpointError::BadHeader("aggregation"))?;
        let similarity = Similarity::from_code(bytes[29]).ok_or(CheckpointError::BadHeader("similarity"))?;
        let flags = bytes[30];
        if flags > 1 {
            return Err(CheckpointError::BadHeader("flags"));
        }
        let encoder = EncoderConfig {
            aggregation,
            similarity,
            exclude_target: flags & 1 == 1,
            g: f64_at(31),
            cosine_eps: f64_at(39),
        };
        if encoder.validate().is_err() {
            return Err(CheckpointError::BadHeader("g/cosine_eps"));
        }
        if dim == 0 {
            return Err(CheckpointError::BadHeader("dim"));
        }

        let mut params = ModelParams::<f32>::zeros(num_users, num_items, dim);
        let n_floats: usize = Tensor::ALL.iter().map(|&t| params.tensor(t).len()).sum();
        let expected = HEADER_LEN + 4 * n_floats;
        if bytes.len() != expected {
            return Err(CheckpointError::Length {
                expected,
                got: bytes.len(),
            });
        }
        let mut floats = bytes[HEADER_LEN..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()));
        for t in Tensor::ALL {
            for x in params.tensor_mut(t) {
                *x = floats.next().expect("length checked");
            }
        }
        Ok(Checkpoint {
            encoder,
            history_len,
            params,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CheckpointError> {
        Self::from_bytes(&fs::read(path)?)
    }
}
