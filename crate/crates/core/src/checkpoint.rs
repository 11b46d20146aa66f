//! Binary checkpoint container.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! magic    8 bytes  "CASCKPT\0"
//! version  u32
//! count    u32
//! entries  count x { name_len u32, name, dtype u8, rank u32, extents u64 * rank, values }
//! meta_len u64
//! meta     JSON
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use serde_json::Value;

use crate::error::{Error, Result};
use crate::tensor::{DType, Scalar, Tensor};

pub const MAGIC: &[u8; 8] = b"CASCKPT\0";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum AnyTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl AnyTensor {
    pub fn dtype(&self) -> DType {
        match self {
            AnyTensor::F32(_) => DType::F32,
            AnyTensor::F64(_) => DType::F64,
        }
    }

    fn shape(&self) -> &[usize] {
        match self {
            AnyTensor::F32(t) => t.shape(),
            AnyTensor::F64(t) => t.shape(),
        }
    }
}

pub trait IntoAny: Scalar {
    fn wrap(t: Tensor<Self>) -> AnyTensor;
    fn unwrap(t: &AnyTensor) -> Option<&Tensor<Self>>;
}

impl IntoAny for f32 {
    fn wrap(t: Tensor<f32>) -> AnyTensor {
        AnyTensor::F32(t)
    }
    fn unwrap(t: &AnyTensor) -> Option<&Tensor<f32>> {
        match t {
            AnyTensor::F32(t) => Some(t),
            AnyTensor::F64(_) => None,
        }
    }
}

impl IntoAny for f64 {
    fn wrap(t: Tensor<f64>) -> AnyTensor {
        AnyTensor::F64(t)
    }
    fn unwrap(t: &AnyTensor) -> Option<&Tensor<f64>> {
        match t {
            AnyTensor::F64(t) => Some(t),
            AnyTensor::F32(_) => None,
        }
    }
}

/// Named tensors plus free-form metadata.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub entries: Vec<(String, AnyTensor)>,
    pub meta: Value,
}

fn write_values<T: Scalar>(t: &Tensor<T>, out: &mut Vec<u8>) {
    for &v in t.data() {
        v.write_le(out);
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Checkpoint(format!("truncated while reading {what} at byte offset {}", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

fn read_values<T: Scalar>(r: &mut Reader<'_>, shape: Vec<usize>, name: &str) -> Result<Tensor<T>> {
    let n: usize = shape.iter().product();
    let size = T::DTYPE.size();
    let raw = r.take(n.checked_mul(size).ok_or_else(|| Error::Checkpoint(format!("`{name}` is too large")))?, name)?;
    let data = raw.chunks_exact(size).map(T::read_le).collect();
    Tensor::new(shape, data).map_err(|e| Error::Checkpoint(format!("`{name}`: {e}")))
}

impl Checkpoint {
    pub fn new(meta: Value) -> Self {
        Checkpoint {
            entries: Vec::new(),
            meta,
        }
    }

    pub fn put<T: IntoAny>(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.entries.push((name.into(), T::wrap(t)));
    }

    pub fn get<T: IntoAny>(&self, name: &str) -> Result<&Tensor<T>> {
        let (_, t) = self
            .entries
            .iter()
            .find(|(n, _)| n == name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?;
        T::unwrap(t).ok_or_else(|| {
            Error::Checkpoint(format!("`{name}` is {:?}, expected {:?}", t.dtype(), T::DTYPE))
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, t) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.dtype().tag());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            match t {
                AnyTensor::F32(t) => write_values(t, &mut out),
                AnyTensor::F64(t) => write_values(t, &mut out),
            }
        }
        let meta = serde_json::to_vec(&self.meta).map_err(|e| Error::Checkpoint(e.to_string()))?;
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8, "magic")? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::CheckpointVersion {
                found: version,
                expected: VERSION,
            });
        }
        let count = r.u32("entry count")?;
        let mut entries = Vec::with_capacity(count.min(4096) as usize);
        for _ in 0..count {
            let len = r.u32("name length")? as usize;
            let name = std::str::from_utf8(r.take(len, "name")?)
                .map_err(|_| Error::Checkpoint(format!("entry name at byte offset {} is not UTF-8", r.pos - len)))?
                .to_string();
            let tag = r.take(1, "dtype")?[0];
            let dtype = DType::from_tag(tag).ok_or_else(|| Error::Checkpoint(format!("`{name}`: unknown dtype tag {tag}")))?;
            let rank = r.u32("rank")? as usize;
            if rank > 8 {
                return Err(Error::Checkpoint(format!("`{name}`: implausible rank {rank}")));
            }
            let shape = (0..rank).map(|_| r.u64("extent").map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let t = match dtype {
                DType::F32 => AnyTensor::F32(read_values(&mut r, shape, &name)?),
                DType::F64 => AnyTensor::F64(read_values(&mut r, shape, &name)?),
            };
            entries.push((name, t));
        }
        let meta_len = r.u64("metadata length")? as usize;
        let meta = serde_json::from_slice(r.take(meta_len, "metadata")?)
            .map_err(|e| Error::Checkpoint(format!("metadata: {e}")))?;
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes after metadata",
                bytes.len() - r.pos
            )));
        }
        Ok(Checkpoint { entries, meta })
    }

    /// Writes to a temporary sibling, then renames over `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        let mut tmp = path.as_os_str().to_owned();
        tmp.push(".tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::data(path, e.to_string()))?;
        Self::from_bytes(&bytes)
    }
}
