//! Binary checkpoint container plus JSON sidecar.
//!
//! Layout (little-endian): magic `MCTC`, version `u32`, tensor count `u32`,
//! then per tensor in name order: name length `u32`, UTF-8 name, rank `u32`,
//! dims `u32 × rank`, raw `f32` payload. The sidecar at `<path>.json` holds
//! the model type, [`ModelConfig`] and [`Vocab`].

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, ModelParams, ModelType, Vocab};
use crate::numerics::{Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"MCTC";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub model_type: ModelType,
    pub config: ModelConfig,
    pub vocab: Vocab,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn encode_params<S: Scalar>(params: &ModelParams<S>) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + params.numel() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &x in t.data() {
            out.extend_from_slice(&(x.as_f64() as f32).to_le_bytes());
        }
    }
    out
}

/// Cursor over a byte buffer that reports failures with their offset.
pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    pub(crate) fn pos(&self) -> usize {
        self.pos
    }

    pub(crate) fn at_end(&self) -> bool {
        self.pos == self.buf.len()
    }

    pub(crate) fn fail<T>(&self, msg: impl Into<String>) -> Result<T> {
        Err(Error::Parse {
            offset: self.pos,
            msg: msg.into(),
        })
    }

    pub(crate) fn bytes(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        match self.pos.checked_add(n) {
            Some(end) if end <= self.buf.len() => {
                let s = &self.buf[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            _ => self.fail(format!(
                "truncated {what}: need {n} bytes, {} left",
                self.buf.len() - self.pos
            )),
        }
    }

    pub(crate) fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.bytes(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()))
    }

    pub(crate) fn string(&mut self, what: &str) -> Result<String> {
        let len = self.u32(what)? as usize;
        let start = self.pos;
        let b = self.bytes(len, what)?;
        String::from_utf8(b.to_vec()).map_err(|_| Error::Parse {
            offset: start,
            msg: format!("{what} is not UTF-8"),
        })
    }

    pub(crate) fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let len = n
            .checked_mul(4)
            .ok_or_else(|| Error::Parse {
                offset: self.pos,
                msg: format!("{what} length overflows"),
            })?;
        let b = self.bytes(len, what)?;
        Ok(b.chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub(crate) fn magic(&mut self, magic: &[u8; 4], version: u32) -> Result<()> {
        let m = self.bytes(4, "magic")?;
        if m != magic {
            self.pos -= 4;
            return self.fail(format!("bad magic {m:?}"));
        }
        let v = self.u32("version")?;
        if v != version {
            self.pos -= 4;
            return self.fail(format!("unsupported version {v}"));
        }
        Ok(())
    }
}

pub fn decode_params(bytes: &[u8]) -> Result<ModelParams<f32>> {
    let mut r = Reader::new(bytes);
    r.magic(MAGIC, VERSION)?;
    let count = r.u32("tensor count")?;
    let mut map = BTreeMap::new();
    for _ in 0..count {
        let name_at = r.pos();
        let name = r.string("tensor name")?;
        let rank = r.u32("rank")? as usize;
        if rank > 8 {
            return r.fail(format!("implausible rank {rank}"));
        }
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u32("dimension")? as usize);
        }
        let numel = dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
        let Some(numel) = numel.filter(|_| dims.iter().all(|&d| d > 0)) else {
            return r.fail(format!("invalid dims {dims:?}"));
        };
        let data = r.f32s(numel, "tensor payload")?;
        let t = Tensor::new(dims, data)?;
        if map.insert(name.clone(), t).is_some() {
            return Err(Error::Parse {
                offset: name_at,
                msg: format!("duplicate tensor {name}"),
            });
        }
    }
    if !r.at_end() {
        return r.fail("trailing bytes");
    }
    Ok(ModelParams::from_map(map))
}

pub fn save<S: Scalar>(model: &Model<S>, path: &Path) -> Result<()> {
    fs::write(path, encode_params(&model.params)).map_err(|e| Error::file(path, e))?;
    let side = Sidecar {
        model_type: model.kind,
        config: model.config.clone(),
        vocab: model.vocab.clone(),
    };
    let sp = sidecar_path(path);
    fs::write(&sp, serde_json::to_string_pretty(&side)?).map_err(|e| Error::file(&sp, e))?;
    Ok(())
}

pub fn load_params(path: &Path) -> Result<ModelParams<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::file(path, e))?;
    decode_params(&bytes)
}

pub fn load_sidecar(path: &Path) -> Result<Sidecar> {
    let sp = sidecar_path(path);
    let text = fs::read_to_string(&sp).map_err(|e| Error::file(&sp, e))?;
    let side: Sidecar = serde_json::from_str(&text)?;
    side.config.validate()?;
    side.vocab.validate()?;
    Ok(side)
}

/// Loads a checkpoint and checks it against the parameter layout implied
/// by its sidecar.
pub fn load(path: &Path) -> Result<Model<f32>> {
    let side = load_sidecar(path)?;
    let mut params = load_params(path)?;
    let expected = ModelParams::<f32>::init(
        &side.config,
        side.vocab.content_size(),
        side.model_type,
        &mut crate::numerics::Rng::new(0),
    )?;
    expected.check_compatible(&params)?;
    params.set_requires_grad(true);
    Ok(Model {
        config: side.config,
        vocab: side.vocab,
        kind: side.model_type,
        params,
    })
}
