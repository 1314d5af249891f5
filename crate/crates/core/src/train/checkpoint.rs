//! Binary training checkpoints.
//!
//! Layout (little-endian throughout):
//!
//! ```text
//! "SDDC" | version u16 | config digest [32] (SHA-256) | param count u32
//! per parameter: name len u32 | name bytes | rank u32 | dims u64 × rank | f32 × numel
//! optimizer: t u64 | buffer count u32 | per buffer: len u64 | m f32 × len | v f32 × len
//! rng: seed u64 | word position u128
//! step u64
//! trainer: initial loss f64 | steps above divergence threshold u64 | loss EMA f64
//! ```

use std::io::{Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"SDDC";
pub const VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct ParamRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub digest: [u8; 32],
    pub params: Vec<ParamRecord>,
    pub adam_t: u64,
    pub adam_m: Vec<Vec<f32>>,
    pub adam_v: Vec<Vec<f32>>,
    pub rng_seed: u64,
    pub rng_word_pos: u128,
    pub step: u64,
    pub initial_loss: f64,
    pub over_threshold: u64,
    pub ema: f64,
}

/// SHA-256 of the canonical JSON encoding of `value`.
pub fn config_digest<S: serde::Serialize>(value: &S) -> Result<[u8; 32]> {
    let bytes = serde_json::to_vec(value)?;
    let mut out = [0u8; 32];
    out.copy_from_slice(Sha256::digest(&bytes).as_slice());
    Ok(out)
}

fn put_f32s(out: &mut Vec<u8>, v: &[f32]) {
    for x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.digest);
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for p in &self.params {
            out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
            out.extend_from_slice(p.name.as_bytes());
            out.extend_from_slice(&(p.shape.len() as u32).to_le_bytes());
            for &d in &p.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            put_f32s(&mut out, &p.data);
        }
        out.extend_from_slice(&self.adam_t.to_le_bytes());
        out.extend_from_slice(&(self.adam_m.len() as u32).to_le_bytes());
        for (m, v) in self.adam_m.iter().zip(&self.adam_v) {
            out.extend_from_slice(&(m.len() as u64).to_le_bytes());
            put_f32s(&mut out, m);
            put_f32s(&mut out, v);
        }
        out.extend_from_slice(&self.rng_seed.to_le_bytes());
        out.extend_from_slice(&self.rng_word_pos.to_le_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&self.initial_loss.to_le_bytes());
        out.extend_from_slice(&self.over_threshold.to_le_bytes());
        out.extend_from_slice(&self.ema.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("bad magic, not an SDDC checkpoint".into()));
        }
        let version = u16::from_le_bytes(r.array()?);
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let digest: [u8; 32] = r.array()?;
        let count = r.u32()? as usize;
        let mut params = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| Error::Checkpoint("shape overflow".into()))?;
            let data = r.f32s(numel)?;
            params.push(ParamRecord { name, shape, data });
        }
        let adam_t = r.u64()?;
        let buffers = r.u32()? as usize;
        let (mut adam_m, mut adam_v) = (Vec::new(), Vec::new());
        for _ in 0..buffers {
            let len = r.u64()? as usize;
            adam_m.push(r.f32s(len)?);
            adam_v.push(r.f32s(len)?);
        }
        let rng_seed = r.u64()?;
        let rng_word_pos = u128::from_le_bytes(r.array()?);
        let step = r.u64()?;
        let initial_loss = f64::from_le_bytes(r.array()?);
        let over_threshold = r.u64()?;
        let ema = f64::from_le_bytes(r.array()?);
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self {
            digest,
            params,
            adam_t,
            adam_m,
            adam_v,
            rng_seed,
            rng_word_pos,
            step,
            initial_loss,
            over_threshold,
            ema,
        })
    }

    /// Written to a temporary file and renamed, so a crash never leaves a torn checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        {
            let mut f = std::fs::File::create(&tmp)?;
            f.write_all(&self.to_bytes())?;
            f.sync_all()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| Error::Checkpoint("truncated checkpoint".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("exact length"))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(n.checked_mul(4).ok_or_else(|| Error::Checkpoint("length overflow".into()))?)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect())
    }
}
