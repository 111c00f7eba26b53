//! Versioned binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    8 bytes  "EVITCKPT"
//! version  u32      1
//! config   u32 x 7  r, channels, dim, heads, depth, mlp_ratio, classes
//!          f64 x 2  dropout, pe_base
//! count    u32      number of tensors
//! tensor   u32 name length, UTF-8 name, u32 rank, u64 x rank dims,
//!          f64 x prod(dims) payload
//! ```

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

use super::tensor::Scalar;
use super::{AdamW, AdamWConfig, ModelConfig, ModelParams, Tensor};

pub const MAGIC: &[u8; 8] = b"EVITCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn from_params<T: Scalar>(params: &ModelParams<T>) -> Self {
        Self {
            config: params.config,
            tensors: named(params, ""),
        }
    }

    /// Parameters plus optimizer moments and the number of finished epochs.
    pub fn with_state<T: Scalar>(params: &ModelParams<T>, opt: &AdamW<T>, epochs_done: usize) -> Self {
        let mut ck = Self::from_params(params);
        ck.tensors.extend(named(&opt.m, "opt.m."));
        ck.tensors.extend(named(&opt.v, "opt.v."));
        let c = opt.config;
        ck.tensors.push(NamedTensor {
            name: "opt.hyper".into(),
            shape: vec![5],
            data: vec![c.beta1, c.beta2, c.eps, c.weight_decay, opt.step as f64],
        });
        ck.tensors.push(NamedTensor {
            name: "train.epochs".into(),
            shape: vec![1],
            data: vec![epochs_done as f64],
        });
        ck
    }

    pub fn get(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn params<T: Scalar>(&self) -> Result<ModelParams<T>> {
        let mut params = ModelParams::<T>::init(self.config, &mut crate::Rng::seed_from_u64(0))?;
        fill(&mut params, self, "")?;
        Ok(params)
    }

    /// Optimizer state and finished epochs, when the checkpoint carries them.
    pub fn train_state<T: Scalar>(&self, params: &ModelParams<T>) -> Result<Option<(AdamW<T>, usize)>> {
        let (Some(hyper), Some(epochs)) = (self.get("opt.hyper"), self.get("train.epochs")) else {
            return Ok(None);
        };
        if hyper.data.len() != 5 || epochs.data.len() != 1 {
            return Err(Error::Config("malformed optimizer state".into()));
        }
        let config = AdamWConfig {
            beta1: hyper.data[0],
            beta2: hyper.data[1],
            eps: hyper.data[2],
            weight_decay: hyper.data[3],
        };
        let mut opt = AdamW::new(params, config);
        opt.step = hyper.data[4] as u64;
        fill(&mut opt.m, self, "opt.m.")?;
        fill(&mut opt.v, self, "opt.v.")?;
        Ok(Some((opt, epochs.data[0] as usize)))
    }
}

fn named<T: Scalar>(params: &ModelParams<T>, prefix: &str) -> Vec<NamedTensor> {
    params
        .tensors()
        .into_iter()
        .map(|(name, t)| NamedTensor {
            name: format!("{prefix}{name}"),
            shape: t.shape.clone(),
            data: t.data.iter().map(|v| v.f64()).collect(),
        })
        .collect()
}

fn fill<T: Scalar>(params: &mut ModelParams<T>, ck: &Checkpoint, prefix: &str) -> Result<()> {
    for (name, t) in params.tensors_mut() {
        let full = format!("{prefix}{name}");
        let src = ck
            .get(&full)
            .ok_or_else(|| Error::Config(format!("checkpoint is missing tensor {full}")))?;
        if src.shape != t.shape {
            return Err(Error::Config(format!(
                "tensor {full} has shape {:?}, expected {:?}",
                src.shape, t.shape
            )));
        }
        *t = Tensor {
            shape: src.shape.clone(),
            data: src.data.iter().map(|&v| T::of(v)).collect(),
        };
    }
    Ok(())
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub(crate) fn encode_tensors(out: &mut Vec<u8>, tensors: &[NamedTensor]) {
    put_u32(out, tensors.len() as u32);
    for t in tensors {
        put_u32(out, t.name.len() as u32);
        out.extend_from_slice(t.name.as_bytes());
        put_u32(out, t.shape.len() as u32);
        for &d in &t.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
}

pub fn write_checkpoint(ck: &Checkpoint) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    let c = &ck.config;
    for v in [c.r, c.channels, c.dim, c.heads, c.depth, c.mlp_ratio, c.classes] {
        put_u32(&mut out, v as u32);
    }
    out.extend_from_slice(&c.dropout.to_le_bytes());
    out.extend_from_slice(&c.pe_base.to_le_bytes());
    encode_tensors(&mut out, &ck.tensors);
    out
}

/// Byte cursor that reports the offset of any short read.
pub(crate) struct Reader<'a> {
    pub bytes: &'a [u8],
    pub pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::parse(self.pos, format!("truncated while reading {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    pub fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    pub fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

pub(crate) fn decode_tensors(rd: &mut Reader<'_>) -> Result<Vec<NamedTensor>> {
    let count = rd.u32("tensor count")? as usize;
    let mut tensors = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let at = rd.pos;
        let len = rd.u32("name length")? as usize;
        let name = std::str::from_utf8(rd.take(len, "tensor name")?)
            .map_err(|_| Error::parse(at + 4, "tensor name is not UTF-8"))?
            .to_string();
        let rank = rd.u32("tensor rank")? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(rd.u64("tensor dims")? as usize);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::parse(rd.pos, "tensor size overflows"))?;
        let payload = rd.take(
            numel
                .checked_mul(8)
                .ok_or_else(|| Error::parse(rd.pos, "tensor size overflows"))?,
            "tensor payload",
        )?;
        let data = payload
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        tensors.push(NamedTensor { name, shape, data });
    }
    Ok(tensors)
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut rd = Reader::new(bytes);
    if rd.take(8, "magic")? != MAGIC {
        return Err(Error::parse(0, "not a checkpoint (bad magic)"));
    }
    let version = rd.u32("version")?;
    if version != VERSION {
        return Err(Error::parse(8, format!("unsupported checkpoint version {version}")));
    }
    let mut dims = [0usize; 7];
    for d in &mut dims {
        *d = rd.u32("model config")? as usize;
    }
    let config = ModelConfig {
        r: dims[0],
        channels: dims[1],
        dim: dims[2],
        heads: dims[3],
        depth: dims[4],
        mlp_ratio: dims[5],
        classes: dims[6],
        dropout: rd.f64("model config")?,
        pe_base: rd.f64("model config")?,
    };
    config.validate()?;
    let tensors = decode_tensors(&mut rd)?;
    if rd.pos != bytes.len() {
        return Err(Error::parse(rd.pos, "trailing bytes after last tensor"));
    }
    Ok(Checkpoint { config, tensors })
}

pub fn save_checkpoint(ck: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&write_checkpoint(ck)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    read_checkpoint(&bytes)
}
