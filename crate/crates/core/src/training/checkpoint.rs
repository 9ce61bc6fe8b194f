//! Binary checkpoint format.
//!
//! ```text
//! magic "FSLCKPT\0" | version u32 | sha256(body) [32]
//! body: u64 meta_len | meta JSON
//!       u32 param_count | { u32 name_len | name | u32 rank | u64 extent* | f64* }
//!       u64 opt_len | optimizer blob
//!       u64 rng_len | rng blob
//! ```
//!
//! All integers and floats are little-endian.

use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::optim::{Optimizer, OptimizerConfig};
use super::TrainConfig;
use crate::error::{Error, Result};
use crate::models::Model;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"FSLCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub config: TrainConfig,
    pub vocab_size: usize,
    pub step: u64,
    pub loss_ema: Option<f64>,
    pub best_val_accuracy: Option<f64>,
    pub best_step: Option<u64>,
}

/// Position of a ChaCha8 generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: Vec<(String, Tensor)>,
    pub optimizer: Optimizer,
    pub rng: RngState,
}

impl Checkpoint {
    /// Model rebuilt from the configuration with the stored parameters.
    pub fn model(&self) -> Result<Model> {
        let mut model = Model::init(self.meta.config.model.clone(), self.meta.vocab_size, 0)?;
        load_params(&mut model, &self.params)?;
        Ok(model)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut body = Vec::new();
        let meta = serde_json::to_vec(&self.meta)?;
        put_u64(&mut body, meta.len() as u64);
        body.extend_from_slice(&meta);
        put_u32(&mut body, self.params.len() as u32);
        for (name, t) in &self.params {
            put_u32(&mut body, name.len() as u32);
            body.extend_from_slice(name.as_bytes());
            put_tensor(&mut body, t);
        }
        let opt = optimizer_blob(&self.optimizer);
        put_u64(&mut body, opt.len() as u64);
        body.extend_from_slice(&opt);
        let rng = rng_blob(&self.rng);
        put_u64(&mut body, rng.len() as u64);
        body.extend_from_slice(&rng);

        let mut out = Vec::with_capacity(body.len() + 44);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        put_u32(&mut out, CHECKPOINT_VERSION);
        out.extend_from_slice(&Sha256::digest(&body));
        out.extend_from_slice(&body);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 44 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(Error::Integrity("not a checkpoint file".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(Error::Integrity(format!(
                "checkpoint format version {version}, this build reads {CHECKPOINT_VERSION}"
            )));
        }
        let body = &bytes[44..];
        if Sha256::digest(body)[..] != bytes[12..44] {
            return Err(Error::Integrity("checksum mismatch".into()));
        }
        let mut r = Reader { buf: body, pos: 0 };
        let meta_len = r.u64()? as usize;
        let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len)?)?;
        let count = r.u32()? as usize;
        let mut params = Vec::with_capacity(count);
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| Error::Integrity("parameter name is not UTF-8".into()))?;
            params.push((name, r.tensor()?));
        }
        let opt_len = r.u64()? as usize;
        let optimizer = read_optimizer(r.take(opt_len)?, meta.config.optimizer)?;
        let rng_len = r.u64()? as usize;
        let rng = read_rng(r.take(rng_len)?)?;
        if r.pos != body.len() {
            return Err(Error::Integrity("trailing bytes after checkpoint body".into()));
        }
        Ok(Self {
            meta,
            params,
            optimizer,
            rng,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Integrity(msg) => Error::Integrity(format!("{}: {msg}", path.display())),
            other => other,
        })
    }
}

/// Copies named tensors into `model`; names and shapes must match exactly.
pub fn load_params(model: &mut Model, params: &[(String, Tensor)]) -> Result<()> {
    if params.len() != model.params.len() {
        return Err(Error::Config(format!(
            "checkpoint has {} parameters, the configured model has {}",
            params.len(),
            model.params.len()
        )));
    }
    for (name, t) in params {
        let id = model.params.id(name).ok_or_else(|| {
            Error::Config(format!("checkpoint parameter '{name}' does not exist in the model"))
        })?;
        let want = model.params.tensor(id).shape().to_vec();
        if t.shape() != want.as_slice() {
            return Err(Error::Config(format!(
                "parameter '{name}' has shape {:?} in the checkpoint but {:?} in the model",
                t.shape(),
                want
            )));
        }
        model.params.set(id, t.clone())?;
    }
    Ok(())
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_tensor(out: &mut Vec<u8>, t: &Tensor) {
    put_u32(out, t.rank() as u32);
    for &e in t.shape() {
        put_u64(out, e as u64);
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn optimizer_blob(opt: &Optimizer) -> Vec<u8> {
    let mut out = Vec::new();
    out.push(match opt.config {
        OptimizerConfig::Sgd { .. } => 0,
        OptimizerConfig::Adam { .. } => 1,
    });
    put_u64(&mut out, opt.step);
    put_u32(&mut out, opt.m.len() as u32);
    for t in opt.m.iter().chain(&opt.v) {
        put_tensor(&mut out, t);
    }
    out
}

fn read_optimizer(blob: &[u8], config: OptimizerConfig) -> Result<Optimizer> {
    let mut r = Reader { buf: blob, pos: 0 };
    let kind = r.take(1)?[0];
    let expected = match config {
        OptimizerConfig::Sgd { .. } => 0,
        OptimizerConfig::Adam { .. } => 1,
    };
    if kind != expected {
        return Err(Error::Integrity("optimizer state does not match its configuration".into()));
    }
    let step = r.u64()?;
    let n = r.u32()? as usize;
    let m = (0..n).map(|_| r.tensor()).collect::<Result<Vec<_>>>()?;
    let v = (0..n).map(|_| r.tensor()).collect::<Result<Vec<_>>>()?;
    Ok(Optimizer { config, step, m, v })
}

fn rng_blob(s: &RngState) -> Vec<u8> {
    let mut out = s.seed.to_vec();
    put_u64(&mut out, s.stream);
    out.extend_from_slice(&s.word_pos.to_le_bytes());
    out
}

fn read_rng(blob: &[u8]) -> Result<RngState> {
    if blob.len() != 56 {
        return Err(Error::Integrity("malformed generator state".into()));
    }
    Ok(RngState {
        seed: blob[..32].try_into().unwrap(),
        stream: u64::from_le_bytes(blob[32..40].try_into().unwrap()),
        word_pos: u128::from_le_bytes(blob[40..56].try_into().unwrap()),
    })
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Integrity("checkpoint truncated".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn tensor(&mut self) -> Result<Tensor> {
        let rank = self.u32()? as usize;
        if rank > 8 {
            return Err(Error::Integrity(format!("implausible tensor rank {rank}")));
        }
        let shape = (0..rank)
            .map(|_| self.u64().map(|e| e as usize))
            .collect::<Result<Vec<_>>>()?;
        let n = shape.iter().try_fold(1usize, |a, &e| a.checked_mul(e));
        let n = n.ok_or_else(|| Error::Integrity("tensor extents overflow".into()))?;
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::Integrity("tensor too large".into()))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Tensor::new(&shape, data).map_err(|e| Error::Integrity(e.to_string()))
    }
}
