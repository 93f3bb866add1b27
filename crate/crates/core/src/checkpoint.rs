//! Named-tensor container file.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      8 bytes  "XLSECKPT"
//! version    u32      currently 1
//! count      u64      number of entries
//! entry * count:
//!   name_len u32
//!   name     name_len bytes, UTF-8
//!   dtype    u8       0 = f32, 1 = f64
//!   rank     u32
//!   dims     rank * u64
//!   payload  product(dims) scalars, little-endian
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::{DType, Float, Tensor};

pub const MAGIC: &[u8; 8] = b"XLSECKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    /// Values widened to f64; narrowing back to the stored dtype is exact.
    pub data: Vec<f64>,
}

impl Entry {
    pub fn from_tensor<T: Float>(name: &str, t: &Tensor<T>) -> Self {
        Self {
            name: name.to_string(),
            dtype: T::DTYPE,
            shape: t.shape().to_vec(),
            data: t.to_f64_vec(),
        }
    }

    pub fn to_tensor<T: Float>(&self) -> Result<Tensor<T>> {
        Tensor::from_f64_slice(&self.data, &self.shape)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub entries: Vec<Entry>,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end =
            end.ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

impl Checkpoint {
    pub fn from_store<T: Float>(store: &ParamStore<T>) -> Self {
        Self {
            entries: store
                .iter()
                .map(|(n, t)| Entry::from_tensor(n, t))
                .collect(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.name == name)
    }

    /// Overwrites every parameter of `store` from this checkpoint. Names and
    /// shapes must match exactly in both directions.
    pub fn load_into<T: Float>(&self, store: &mut ParamStore<T>) -> Result<()> {
        if self.entries.len() != store.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} tensors, model expects {}",
                self.entries.len(),
                store.len()
            )));
        }
        for e in &self.entries {
            let id = store.id(&e.name).ok_or_else(|| {
                Error::Checkpoint(format!(
                    "tensor `{}` is not a parameter of this model",
                    e.name
                ))
            })?;
            if store.get(id).shape() != e.shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{}` has shape {:?}, model expects {:?}",
                    e.name,
                    e.shape,
                    store.get(id).shape()
                )));
            }
            store.set(id, e.to_tensor()?)?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u64).to_le_bytes());
        for e in &self.entries {
            out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.push(e.dtype.tag());
            out.extend_from_slice(&(e.shape.len() as u32).to_le_bytes());
            for &d in &e.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in &e.data {
                match e.dtype {
                    DType::F32 => (v as f32).write_le(&mut out),
                    DType::F64 => v.write_le(&mut out),
                }
            }
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("bad magic, not a checkpoint file".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {version}"
            )));
        }
        let count = r.u64()?;
        let mut entries = Vec::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
                .to_string();
            let tag = r.u8()?;
            let dtype = DType::from_tag(tag).ok_or_else(|| {
                Error::Checkpoint(format!("unknown dtype tag {tag} for `{name}`"))
            })?;
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64()? as usize);
            }
            let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let n = n.ok_or_else(|| Error::Checkpoint(format!("shape overflow for `{name}`")))?;
            let size = dtype.size_of();
            let raw = r.take(n.saturating_mul(size))?;
            let data = raw
                .chunks_exact(size)
                .map(|c| match dtype {
                    DType::F32 => f32::read_le(c) as f64,
                    DType::F64 => f64::read_le(c),
                })
                .collect();
            entries.push(Entry {
                name,
                dtype,
                shape,
                data,
            });
        }
        if r.pos != buf.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes",
                buf.len() - r.pos
            )));
        }
        Ok(Self { entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}
