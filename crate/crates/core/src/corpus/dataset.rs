//! Dataset container (little-endian): magic `MCDS`, version `u32`,
//! utterance count `u32`; per utterance: id (`u32` length + UTF-8),
//! `L u32`, token ids `u32 × L`, `T u32`, `D u32`, features `f32 × T·D`.

use std::fs;
use std::path::Path;

use crate::corpus::Utterance;
use crate::error::{Error, Result};
use crate::model::checkpoint::Reader;
use crate::numerics::Tensor;

pub const DATASET_MAGIC: &[u8; 4] = b"MCDS";
pub const DATASET_VERSION: u32 = 1;

pub fn encode(utts: &[Utterance]) -> Vec<u8> {
    let mut out = Vec::new();
    let u32le = |out: &mut Vec<u8>, v: usize| out.extend_from_slice(&(v as u32).to_le_bytes());
    out.extend_from_slice(DATASET_MAGIC);
    u32le(&mut out, DATASET_VERSION as usize);
    u32le(&mut out, utts.len());
    for u in utts {
        u32le(&mut out, u.id.len());
        out.extend_from_slice(u.id.as_bytes());
        u32le(&mut out, u.transcript.len());
        for &t in &u.transcript {
            u32le(&mut out, t);
        }
        u32le(&mut out, u.features.shape()[0]);
        u32le(&mut out, u.features.shape()[1]);
        for &x in u.features.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<Vec<Utterance>> {
    if bytes.is_empty() {
        return Ok(Vec::new());
    }
    let mut r = Reader::new(bytes);
    r.magic(DATASET_MAGIC, DATASET_VERSION)?;
    let count = r.u32("utterance count")? as usize;
    let mut utts = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let id = r.string("utterance id")?;
        let len = r.u32("transcript length")? as usize;
        let mut transcript = Vec::with_capacity(len.min(1 << 16));
        for _ in 0..len {
            transcript.push(r.u32("token id")? as usize);
        }
        let t = r.u32("frame count")? as usize;
        let d = r.u32("feature dim")? as usize;
        if t == 0 || d == 0 {
            return r.fail(format!("utterance {id} has empty features {t}x{d}"));
        }
        let n = t.checked_mul(d).ok_or_else(|| Error::Parse {
            offset: r.pos(),
            msg: "feature size overflows".into(),
        })?;
        let data = r.f32s(n, "features")?;
        utts.push(Utterance {
            id,
            features: Tensor::new([t, d], data)?,
            transcript,
        });
    }
    if !r.at_end() {
        return r.fail("trailing bytes");
    }
    Ok(utts)
}

pub fn write_dataset(utts: &[Utterance], path: &Path) -> Result<()> {
    fs::write(path, encode(utts)).map_err(|e| Error::file(path, e))
}

/// Reads a dataset file. A zero-byte file is an empty dataset.
pub fn read_dataset(path: &Path) -> Result<Vec<Utterance>> {
    let bytes = fs::read(path).map_err(|e| Error::file(path, e))?;
    decode(&bytes)
}
