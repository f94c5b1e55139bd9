//! Checkpoint files: named f64 tensors, optimizer state included.
//!
//! `b"CVFT"`, u16 version, u32 record count, then per record: u16 name
//! length, UTF-8 name, u8 ndims, u32 dims, f64 payload. Little-endian.

use std::path::Path;

use indexmap::IndexMap;

use super::tensor::{check_magic, Reader};
use crate::error::{Error, Result};
use crate::optim::AdamState;
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CVFT";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ParamStore,
    pub optimizer: Option<AdamState>,
}

fn push_record(out: &mut Vec<u8>, name: &str, t: &Tensor) -> Result<()> {
    let len = u16::try_from(name.len()).map_err(|_| Error::Format(format!("name too long: {name}")))?;
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(u8::try_from(t.shape().len()).map_err(|_| Error::Format("too many dims".into()))?);
    for &d in t.shape() {
        let d = u32::try_from(d).map_err(|_| Error::Format(format!("dimension {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    t.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
    Ok(())
}

impl Checkpoint {
    pub fn encode(&self) -> Result<Vec<u8>> {
        let extra = self.optimizer.as_ref().map(AdamState::as_tensors).unwrap_or_default();
        let count = u32::try_from(self.params.len() + extra.len())
            .map_err(|_| Error::Format("too many records".into()))?;
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&count.to_le_bytes());
        for (name, t) in self.params.iter() {
            push_record(&mut out, name, t)?;
        }
        for (name, t) in &extra {
            push_record(&mut out, name, t)?;
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "checkpoint");
        check_magic(&mut r, CHECKPOINT_MAGIC, CHECKPOINT_VERSION)?;
        let count = r.u32()?;
        let mut params = ParamStore::new();
        let mut step = None;
        let mut first = IndexMap::new();
        let mut second = IndexMap::new();
        for _ in 0..count {
            let len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Format("record name is not UTF-8".into()))?
                .to_string();
            let ndims = r.u8()? as usize;
            let dims = (0..ndims).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n = dims
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| Error::Format("record size overflows".into()))?;
            let data = r.f64s(n)?;
            if data.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteValue(format!("checkpoint record `{name}`")));
            }
            if name == "adam.step" {
                step = Some(data.first().copied().unwrap_or(0.0) as u64);
            } else if let Some(p) = name.strip_prefix("adam.m.") {
                first.insert(p.to_string(), data);
            } else if let Some(p) = name.strip_prefix("adam.v.") {
                second.insert(p.to_string(), data);
            } else {
                params.insert(name, Tensor::new(dims, data)?);
            }
        }
        r.finish()?;
        let optimizer = step.map(|step| AdamState { step, first, second });
        Ok(Self { params, optimizer })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.encode()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}
