//! Binary checkpoint: `"MOFG"`, version, named little-endian `f32` tensors,
//! the vocabulary and the configuration as JSON.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::FusionStrategy;
use crate::model::{LmConfig, ModelParams};
use crate::numerics::Tensor2D;
use crate::params::NamedTensors;
use crate::text::Vocab;
use crate::vision::VisionConfig;

use super::Stage;

const MAGIC: &[u8; 4] = b"MOFG";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub vision: VisionConfig,
    pub lm: LmConfig,
    pub strategy: FusionStrategy,
    pub adapter_frozen: bool,
    pub lm_frozen: bool,
    pub stage: Option<Stage>,
    pub step: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams<f32>,
    pub vocab: Vocab,
    pub meta: CheckpointMeta,
}

impl Checkpoint {
    pub fn new(
        params: ModelParams<f32>,
        vocab: Vocab,
        vision: VisionConfig,
        lm: LmConfig,
        stage: Option<Stage>,
        step: u64,
    ) -> Self {
        let meta = CheckpointMeta {
            vision,
            lm,
            strategy: params.strategy,
            adapter_frozen: params.adapter.frozen,
            lm_frozen: params.lm.frozen,
            stage,
            step,
        };
        Self {
            params,
            vocab,
            meta,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let named = self.params.named();
        out.extend_from_slice(&(named.len() as u32).to_le_bytes());
        for (name, t) in named {
            put_str(&mut out, &name);
            out.push(2);
            out.extend_from_slice(&(t.rows() as u64).to_le_bytes());
            out.extend_from_slice(&(t.cols() as u64).to_le_bytes());
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out.extend_from_slice(&(self.vocab.len() as u32).to_le_bytes());
        for tok in self.vocab.tokens() {
            put_str(&mut out, tok);
        }
        let json = serde_json::to_string(&self.meta).map_err(|e| Error::Format(e.to_string()))?;
        put_str(&mut out, &json);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let n = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(n.min(1024));
        for _ in 0..n {
            let name = r.string()?;
            let rank = r.take(1)?[0];
            if rank != 2 {
                return Err(Error::Format(format!("tensor {name} has rank {rank}")));
            }
            let rows = r.u64()? as usize;
            let cols = r.u64()? as usize;
            let len = rows
                .checked_mul(cols)
                .filter(|&l| l <= r.remaining() / 4)
                .ok_or_else(|| Error::Format(format!("tensor {name} overruns the file")))?;
            let data = r
                .take(len * 4)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.push((name, Tensor2D::from_vec(rows, cols, data)?));
        }
        let n_tokens = r.u32()? as usize;
        let mut tokens = Vec::with_capacity(n_tokens.min(65536));
        for _ in 0..n_tokens {
            tokens.push(r.string()?);
        }
        let vocab = Vocab::from_tokens(tokens).map_err(|e| Error::Format(e.to_string()))?;
        let meta: CheckpointMeta = serde_json::from_str(&r.string()?)
            .map_err(|e| Error::Format(format!("bad config block: {e}")))?;
        if r.remaining() != 0 {
            return Err(Error::Format("trailing bytes after the config block".into()));
        }

        let mut params = ModelParams::<f32>::init(&meta.vision, &meta.lm, vocab.len(), meta.strategy, 0)
            .map_err(|e| Error::Format(format!("stored configuration is invalid: {e}")))?;
        params.adapter.frozen = meta.adapter_frozen;
        params.lm.frozen = meta.lm_frozen;
        {
            let mut slots = params.named_mut();
            if slots.len() != tensors.len() {
                return Err(Error::Format(format!(
                    "{} tensors stored, {} expected",
                    tensors.len(),
                    slots.len()
                )));
            }
            for ((want, slot), (name, t)) in slots.iter_mut().zip(tensors) {
                if *want != name || slot.shape() != t.shape() {
                    return Err(Error::Format(format!(
                        "stored tensor {name} {:?} does not fit {want} {:?}",
                        t.shape(),
                        slot.shape()
                    )));
                }
                **slot = t;
            }
        }
        Ok(Self {
            params,
            vocab,
            meta,
        })
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(Error::Format("checkpoint is truncated".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        let mut a = [0u8; 8];
        a.copy_from_slice(b);
        Ok(u64::from_le_bytes(a))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Format("string is not UTF-8".into()))
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    std::fs::write(path, ckpt.to_bytes()?).map_err(|e| Error::io(path, e))
}

/// Reads a checkpoint; with `expected` set, a checkpoint wired for another
/// fusion strategy is a configuration error.
pub fn load_checkpoint(path: &Path, expected: Option<FusionStrategy>) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let ckpt = Checkpoint::from_bytes(&bytes)?;
    if let Some(s) = expected {
        if s != ckpt.meta.strategy {
            return Err(Error::Config(format!(
                "checkpoint was trained with {}, requested {s}",
                ckpt.meta.strategy
            )));
        }
    }
    Ok(ckpt)
}
