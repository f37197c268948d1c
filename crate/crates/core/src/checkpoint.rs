//! Versioned named-tensor container.
//!
//! Layout (all integers little-endian):
//! `magic[8] | version u32 | step u64 | config_len u32 | config utf-8 | count u32 |`
//! `count x (name_len u16 | name | dtype u8 | rank u8 | dims u64 x rank | offset u64) | payload`.
//! Offsets are relative to the start of the payload section.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Result, SimError};
use crate::tensor::{DType, Scalar, Tensor};

pub const MAGIC: &[u8; 8] = b"SIMCKPT\0";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    /// Values widened to f64; narrowing back to the stored dtype is exact.
    pub data: Vec<f64>,
}

impl NamedTensor {
    pub fn from_tensor<T: Scalar>(name: impl Into<String>, t: &Tensor<T>) -> Self {
        NamedTensor {
            name: name.into(),
            dtype: T::DTYPE,
            shape: t.shape().to_vec(),
            data: t.to_f64_vec(),
        }
    }

    pub fn from_slice<T: Scalar>(name: impl Into<String>, v: &[T]) -> Self {
        NamedTensor {
            name: name.into(),
            dtype: T::DTYPE,
            shape: vec![v.len()],
            data: v.iter().map(|x| x.f64()).collect(),
        }
    }

    pub fn to_tensor<T: Scalar>(&self) -> Result<Tensor<T>> {
        Tensor::from_f64(self.shape.clone(), &self.data)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    pub config: String,
    pub tensors: Vec<NamedTensor>,
}

fn corrupt(path: &Path, msg: impl std::fmt::Display) -> SimError {
    SimError::Checkpoint(format!("{}: {msg}", path.display()))
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Result<&NamedTensor> {
        self.tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| SimError::Checkpoint(format!("missing tensor `{name}`")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut head = Vec::new();
        head.extend_from_slice(MAGIC);
        head.extend_from_slice(&VERSION.to_le_bytes());
        head.extend_from_slice(&self.step.to_le_bytes());
        head.extend_from_slice(&(self.config.len() as u32).to_le_bytes());
        head.extend_from_slice(self.config.as_bytes());
        head.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        let mut payload = Vec::new();
        for t in &self.tensors {
            head.extend_from_slice(&(t.name.len() as u16).to_le_bytes());
            head.extend_from_slice(t.name.as_bytes());
            head.push(t.dtype.tag());
            head.push(t.shape.len() as u8);
            for &d in &t.shape {
                head.extend_from_slice(&(d as u64).to_le_bytes());
            }
            head.extend_from_slice(&(payload.len() as u64).to_le_bytes());
            match t.dtype {
                DType::F32 => t.data.iter().for_each(|&v| payload.extend_from_slice(&(v as f32).to_le_bytes())),
                DType::F64 => t.data.iter().for_each(|&v| payload.extend_from_slice(&v.to_le_bytes())),
            }
        }
        head.extend(payload);
        head
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| SimError::io(dir, e))?;
        }
        // Write-then-rename so an interrupted save never leaves a truncated file behind.
        let tmp = path.with_extension("tmp");
        let mut f = std::fs::File::create(&tmp).map_err(|e| SimError::io(&tmp, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| SimError::io(&tmp, e))?;
        f.sync_all().map_err(|e| SimError::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| SimError::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| SimError::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|msg| corrupt(path, msg))
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err("not a checkpoint (bad magic)".into());
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(format!("unsupported format version {version}"));
        }
        let step = r.u64()?;
        let clen = r.u32()? as usize;
        let config = String::from_utf8(r.take(clen)?.to_vec()).map_err(|_| "config is not utf-8".to_string())?;
        let count = r.u32()? as usize;
        let mut table = Vec::with_capacity(count);
        for _ in 0..count {
            let nlen = r.u16()? as usize;
            let name = String::from_utf8(r.take(nlen)?.to_vec()).map_err(|_| "tensor name is not utf-8".to_string())?;
            let dtype = DType::from_tag(r.u8()?).ok_or_else(|| format!("`{name}`: unknown dtype"))?;
            let rank = r.u8()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<std::result::Result<Vec<_>, _>>()?;
            let offset = r.u64()? as usize;
            table.push((name, dtype, shape, offset));
        }
        let payload = &bytes[r.pos..];
        let mut tensors = Vec::with_capacity(count);
        for (name, dtype, shape, offset) in table {
            let n: usize = shape.iter().product();
            let size = dtype.size_of();
            let end = offset
                .checked_add(n * size)
                .filter(|&e| e <= payload.len())
                .ok_or_else(|| format!("`{name}`: payload out of range"))?;
            let raw = &payload[offset..end];
            let data = match dtype {
                DType::F32 => raw.chunks_exact(4).map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap()))).collect(),
                DType::F64 => raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
            };
            tensors.push(NamedTensor { name, dtype, shape, data });
        }
        Ok(Checkpoint { step, config, tensors })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or("truncated header")?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> std::result::Result<u8, String> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> std::result::Result<u16, String> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
