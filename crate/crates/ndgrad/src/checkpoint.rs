//! Binary parameter checkpoints.
//!
//! Layout (little-endian): magic `VXCK`, `u32` version, `u64` config
//! fingerprint, `u32` parameter count, then per parameter a `u32` name
//! length, the UTF-8 name, a `u32` rank, `rank` `u32` dims and the
//! row-major `f32` payload.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{NdError, Result};
use crate::params::ParamSet;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"VXCK";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub fingerprint: u64,
    pub entries: Vec<(String, Tensor)>,
}

fn bad(msg: impl Into<String>) -> NdError {
    NdError::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn from_params(params: &ParamSet, fingerprint: u64) -> Self {
        Self {
            fingerprint,
            entries: params
                .iter()
                .map(|(n, p)| (n.to_string(), p.value.clone()))
                .collect(),
        }
    }

    /// Copies every entry into `params`, which must hold exactly the same
    /// names and shapes.
    pub fn apply_to(&self, params: &mut ParamSet, expected_fingerprint: u64) -> Result<()> {
        if self.fingerprint != expected_fingerprint {
            return Err(NdError::Fingerprint {
                expected: expected_fingerprint,
                found: self.fingerprint,
            });
        }
        if self.entries.len() != params.len() {
            return Err(bad(format!(
                "checkpoint has {} parameters, model has {}",
                self.entries.len(),
                params.len()
            )));
        }
        for (name, value) in &self.entries {
            params.set_value(name, value.clone())?;
        }
        Ok(())
    }

    /// Builds a parameter set from the entries, all flagged trainable.
    pub fn to_params(&self) -> Result<ParamSet> {
        let mut set = ParamSet::new();
        for (name, value) in &self.entries {
            set.insert(name.clone(), value.clone(), true)?;
        }
        Ok(set)
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&self.fingerprint.to_le_bytes())?;
        w.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        for (name, t) in &self.entries {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(t.rank() as u32).to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            let mut buf = Vec::with_capacity(t.len() * 4);
            for &v in t.data() {
                buf.extend_from_slice(&(v as f32).to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(bad("bad magic"));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let mut fp = [0u8; 8];
        r.read_exact(&mut fp)?;
        let fingerprint = u64::from_le_bytes(fp);
        let count = read_u32(&mut r)? as usize;
        let mut entries = Vec::with_capacity(count);
        for _ in 0..count {
            let len = read_u32(&mut r)? as usize;
            let mut name = vec![0u8; len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|_| bad("parameter name is not UTF-8"))?;
            let rank = read_u32(&mut r)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(read_u32(&mut r)? as usize);
            }
            let n: usize = shape.iter().product();
            let mut buf = vec![0u8; n * 4];
            r.read_exact(&mut buf)?;
            let data = buf
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            entries.push((name, Tensor::new(shape, data)?));
        }
        Ok(Self {
            fingerprint,
            entries,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut bytes = Vec::new();
        self.write_to(&mut bytes)?;
        std::fs::write(path, bytes)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::read_from(bytes.as_slice())
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}
