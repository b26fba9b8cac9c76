//! Binary checkpoint format.
//!
//! Little-endian: magic `CFNR`, format version u32, the ModelConfig fields
//! (five u32 dims, f32 dropout, u64 seed), then the five tensors in order
//! (embed, w1, b1, w2, b2), each as rank u32, dims as u32s, and a row-major
//! f32 payload. The loader rejects mismatched magic or version.

use super::{ModelConfig, Tensor, TokenClassifier};
use crate::{Error, Result};
use std::fs;
use std::path::Path;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"CFNR";
pub const CHECKPOINT_VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_tensor(out: &mut Vec<u8>, t: &Tensor) {
    put_u32(out, t.shape.len() as u32);
    for &d in &t.shape {
        put_u32(out, d as u32);
    }
    for &v in &t.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Serialize a model.
pub fn checkpoint_bytes(model: &TokenClassifier) -> Vec<u8> {
    let cfg = &model.config;
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    put_u32(&mut out, CHECKPOINT_VERSION);
    put_u32(&mut out, cfg.vocab_size as u32);
    put_u32(&mut out, cfg.embed_dim as u32);
    put_u32(&mut out, cfg.window as u32);
    put_u32(&mut out, cfg.hidden_dim as u32);
    put_u32(&mut out, cfg.num_tags as u32);
    out.extend_from_slice(&cfg.dropout.to_le_bytes());
    out.extend_from_slice(&cfg.seed.to_le_bytes());
    for t in model.tensors() {
        put_tensor(&mut out, t);
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint("truncated checkpoint".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn tensor(&mut self, expect: &[usize]) -> Result<Tensor> {
        let rank = self.u32()? as usize;
        if rank != expect.len() {
            return Err(Error::Checkpoint(format!(
                "tensor rank {rank}, expected {}",
                expect.len()
            )));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u32()? as usize);
        }
        if shape != expect {
            return Err(Error::Checkpoint(format!(
                "tensor shape {shape:?}, expected {expect:?}"
            )));
        }
        let len: usize = shape.iter().product();
        let mut data = Vec::with_capacity(len);
        for _ in 0..len {
            data.push(self.f32()?);
        }
        Ok(Tensor {
            grad: vec![0.0; data.len()],
            data,
            shape,
        })
    }
}

/// Deserialize a model, restoring parameters bit-exactly.
pub fn load_checkpoint_bytes(bytes: &[u8]) -> Result<TokenClassifier> {
    let mut cur = Cursor { bytes, pos: 0 };
    let magic = cur.take(4)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint(format!("bad magic {magic:?}")));
    }
    let version = cur.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported version {version} (expected {CHECKPOINT_VERSION})"
        )));
    }
    let config = ModelConfig {
        vocab_size: cur.u32()? as usize,
        embed_dim: cur.u32()? as usize,
        window: cur.u32()? as usize,
        hidden_dim: cur.u32()? as usize,
        num_tags: cur.u32()? as usize,
        dropout: cur.f32()?,
        seed: cur.u64()?,
    };
    config
        .validate()
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
    let embed = cur.tensor(&[config.vocab_size, config.embed_dim])?;
    let w1 = cur.tensor(&[config.hidden_dim, config.input_dim()])?;
    let b1 = cur.tensor(&[config.hidden_dim])?;
    let w2 = cur.tensor(&[config.num_tags, config.hidden_dim])?;
    let b2 = cur.tensor(&[config.num_tags])?;
    if cur.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes after tensors".into()));
    }
    Ok(TokenClassifier {
        config,
        embed,
        w1,
        b1,
        w2,
        b2,
        version: 0,
    })
}

pub fn save_checkpoint(model: &TokenClassifier, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, checkpoint_bytes(model)).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<TokenClassifier> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    load_checkpoint_bytes(&bytes)
}
