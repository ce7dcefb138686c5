//! Binary checkpoints: `COC1`, version, tensor count, then per tensor its
//! name, rank, dims and little-endian `f32` data.

use std::path::Path;

use super::{Model, ModelConfig};
use crate::engine::{Scalar, Tensor};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"COC1";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointTensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Checkpoint(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

pub fn encode_checkpoint<T: Scalar>(model: &Model<T>) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(16 + 4 * model.count_parameters());
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION as usize)?;
    put_u32(&mut out, model.params().len())?;
    for p in model.params().iter() {
        put_u32(&mut out, p.name.len())?;
        out.extend_from_slice(p.name.as_bytes());
        put_u32(&mut out, p.value.rank())?;
        for &d in p.value.shape() {
            put_u32(&mut out, d)?;
        }
        for &v in p.value.data() {
            out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    Ok(out)
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
            .ok_or_else(|| Error::Checkpoint(format!("truncated file at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Vec<CheckpointTensor>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic, not a COC1 checkpoint".into()));
    }
    let version = r.u32()?;
    if version != VERSION as usize {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let count = r.u32()?;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = r.u32()?;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32()?;
        let dims = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let n = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Checkpoint(format!("tensor {name}: size overflow")))?;
        let raw = r.take(n.checked_mul(4).ok_or_else(|| Error::Checkpoint(format!("tensor {name}: size overflow")))?)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        out.push(CheckpointTensor { name, dims, data });
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(out)
}

pub fn save_checkpoint<T: Scalar>(model: &Model<T>, path: &Path) -> Result<()> {
    std::fs::write(path, encode_checkpoint(model)?)?;
    Ok(())
}

/// Loads a checkpoint into a model built from `config`; every tensor must
/// match the config's registry by name and shape.
pub fn load_checkpoint(path: &Path, config: ModelConfig) -> Result<Model<f32>> {
    let bytes = std::fs::read(path)
        .map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
    let tensors = decode_checkpoint(&bytes)?;
    let mut model = Model::<f32>::build(config, 0)?;
    let mut seen = vec![false; model.params().len()];
    for t in tensors {
        let idx = model
            .params()
            .index_of(&t.name)
            .ok_or_else(|| Error::Checkpoint(format!("tensor {} is not part of this config", t.name)))?;
        let slot = model.params_mut().get_mut(&t.name).expect("indexed");
        if slot.shape() != t.dims.as_slice() {
            return Err(Error::Checkpoint(format!(
                "tensor {}: checkpoint shape {:?}, config expects {:?}",
                t.name,
                t.dims,
                slot.shape()
            )));
        }
        *slot = Tensor::new(&t.dims, t.data)?;
        seen[idx] = true;
    }
    if let Some(i) = seen.iter().position(|s| !s) {
        let name = &model.params().iter().nth(i).expect("in range").name;
        return Err(Error::Checkpoint(format!("tensor {name} missing from checkpoint")));
    }
    Ok(model)
}
