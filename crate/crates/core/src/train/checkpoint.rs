use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Metrics, TrainConfig};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ParamSet, SplitModel};

pub const MAGIC: &[u8; 4] = b"ENTC";
pub const VERSION: u8 = 1;

/// JSON blob stored ahead of the tensors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    #[serde(default)]
    pub train: Option<TrainConfig>,
    #[serde(default)]
    pub metrics: Option<Metrics>,
}

/// Trained model plus the metadata it was produced with.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub model: SplitModel,
}

impl Checkpoint {
    pub fn new(model: SplitModel, train: Option<TrainConfig>, metrics: Option<Metrics>) -> Self {
        let meta = CheckpointMeta { model: model.config().clone(), train, metrics };
        Checkpoint { meta, model }
    }

    /// Layout: magic, version `u8`, `u32` length + JSON metadata, `u32`
    /// tensor count, then per tensor `u16` name length, UTF-8 name, rank
    /// `u8`, `u32` dims, little-endian `f32` data. All integers little-endian.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        let meta = serde_json::to_vec(&self.meta)?;
        out.extend_from_slice(&len_u32(meta.len())?.to_le_bytes());
        out.extend_from_slice(&meta);
        let params = self.model.params();
        out.extend_from_slice(&len_u32(params.len())?.to_le_bytes());
        for (name, t) in params.iter() {
            let name_len = u16::try_from(name.len()).map_err(|_| Error::Format(format!("name too long: {name}")))?;
            out.extend_from_slice(&name_len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(u8::try_from(t.shape().len()).map_err(|_| Error::Format("rank over 255".into()))?);
            for &d in t.shape() {
                out.extend_from_slice(&len_u32(d)?.to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 4];
        read(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = read_u8(&mut r)?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let meta_len = read_u32(&mut r)? as usize;
        let meta: CheckpointMeta = serde_json::from_slice(take(&mut r, meta_len)?)?;
        let count = read_u32(&mut r)?;
        let mut params = ParamSet::new();
        for _ in 0..count {
            let name_len = read_u16(&mut r)? as usize;
            let name = std::str::from_utf8(take(&mut r, name_len)?)
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
                .to_string();
            let rank = read_u8(&mut r)? as usize;
            let shape = (0..rank).map(|_| read_u32(&mut r).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let raw = take(&mut r, n.checked_mul(4).ok_or_else(|| Error::Format("tensor too large".into()))?)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("four bytes"))).collect();
            params.push(name, Tensor::new(&shape, data)?);
        }
        if !r.is_empty() {
            return Err(Error::Format(format!("{} trailing bytes in checkpoint", r.len())));
        }
        let model = SplitModel::from_params(meta.model.clone(), &params)?;
        Ok(Checkpoint { meta, model })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

fn len_u32(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Format(format!("length {n} exceeds u32")))
}

fn take<'a>(r: &mut &'a [u8], n: usize) -> Result<&'a [u8]> {
    if r.len() < n {
        return Err(Error::Format("truncated checkpoint".into()));
    }
    let (head, tail) = r.split_at(n);
    *r = tail;
    Ok(head)
}

fn read(r: &mut &[u8], buf: &mut [u8]) -> Result<()> {
    buf.copy_from_slice(take(r, buf.len())?);
    Ok(())
}

fn read_u8(r: &mut &[u8]) -> Result<u8> {
    Ok(take(r, 1)?[0])
}

fn read_u16(r: &mut &[u8]) -> Result<u16> {
    Ok(u16::from_le_bytes(take(r, 2)?.try_into().expect("two bytes")))
}

fn read_u32(r: &mut &[u8]) -> Result<u32> {
    Ok(u32::from_le_bytes(take(r, 4)?.try_into().expect("four bytes")))
}
