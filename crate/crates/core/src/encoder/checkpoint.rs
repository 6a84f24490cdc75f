//! Binary checkpoint container. All integers little-endian:
//!
//! ```text
//! magic        8 bytes  "SSACKPT\0"
//! version      u32      = 1
//! n_meta       u32      then n_meta × (u32 len, key utf-8, u32 len, value utf-8)
//!                       EncoderConfig pairs followed by `pooling`
//! seed         u64
//! epoch        u32
//! n_vocab      u32      then n_vocab × (u32 len, token utf-8); non-reserved entries only
//! n_params     u32      then n_params × (u32 len, name utf-8, u32 ndim,
//!                                        ndim × u32 dim, numel × f32)
//! ```

use std::fs;
use std::path::Path;

use super::{EncoderConfig, EncoderModel, Pooling};
use crate::corpus::Vocabulary;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SSACKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: EncoderModel,
    pub pooling: Pooling,
    pub vocab: Vocabulary,
    pub seed: u64,
    pub epoch: u32,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        put_u32(&mut out, CHECKPOINT_VERSION);

        let mut meta = self.model.config().to_pairs();
        meta.push(("pooling".to_string(), self.pooling.as_str().to_string()));
        put_u32(&mut out, meta.len() as u32);
        for (k, v) in &meta {
            put_str(&mut out, k);
            put_str(&mut out, v);
        }
        out.extend_from_slice(&self.seed.to_le_bytes());
        put_u32(&mut out, self.epoch);

        let entries = self.vocab.entries();
        put_u32(&mut out, entries.len() as u32);
        for t in entries {
            put_str(&mut out, t);
        }

        let params = self.model.params();
        put_u32(&mut out, params.len() as u32);
        for p in params {
            put_str(&mut out, &p.name);
            put_u32(&mut out, p.value.shape().len() as u32);
            for &d in p.value.shape() {
                put_u32(&mut out, d as u32);
            }
            for v in p.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let n_meta = r.u32()?;
        let mut meta = Vec::with_capacity(n_meta as usize);
        for _ in 0..n_meta {
            meta.push((r.string()?, r.string()?));
        }
        let pooling = meta
            .iter()
            .find(|(k, _)| k == "pooling")
            .and_then(|(_, v)| Pooling::parse(v))
            .ok_or_else(|| Error::Checkpoint("missing or bad `pooling`".into()))?;
        let config = EncoderConfig::from_pairs(&meta)?;
        let seed = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
        let epoch = r.u32()?;

        let n_vocab = r.u32()?;
        let mut tokens = Vec::with_capacity(n_vocab as usize);
        for _ in 0..n_vocab {
            tokens.push(r.string()?);
        }
        let vocab = Vocabulary::from_tokens(tokens)?;

        let n_params = r.u32()?;
        let mut params = Vec::with_capacity(n_params as usize);
        for _ in 0..n_params {
            let name = r.string()?;
            let ndim = r.u32()? as usize;
            let shape = (0..ndim)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let raw = r.take(numel * 4)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            params.push((name, Tensor::new(shape, data)?));
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        Ok(Checkpoint {
            model: EncoderModel::from_params(config, params)?,
            pooling,
            vocab,
            seed,
            epoch,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Checkpoint::from_bytes(&fs::read(path)?)
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Checkpoint("invalid utf-8".into()))
    }
}
