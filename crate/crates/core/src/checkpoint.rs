//! Flat binary tensor container.
//!
//! Layout (little-endian): ASCII `RVAE`, `u32` version, `u32` tensor count,
//! then per tensor `u32` name length, UTF-8 name, `u32` rank, `u64` per
//! dimension, and the `f64` payload.

use std::fs;
use std::io::{self, Write};
use std::path::Path;

use crate::error::{Result, RvaeError};
use crate::linalg::DenseMatrix;

pub const MAGIC: &[u8; 4] = b"RVAE";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub dims: Vec<u64>,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    tensors: Vec<Tensor>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn push(&mut self, name: impl Into<String>, dims: Vec<u64>, data: Vec<f64>) -> Result<()> {
        let name = name.into();
        let count: u64 = dims.iter().product();
        if count != data.len() as u64 {
            return Err(RvaeError::contract(format!(
                "tensor {name}: dims {dims:?} hold {count} values, got {}",
                data.len()
            )));
        }
        if self.get(&name).is_some() {
            return Err(RvaeError::contract(format!("duplicate tensor {name}")));
        }
        self.tensors.push(Tensor { name, dims, data });
        Ok(())
    }

    pub fn push_scalar(&mut self, name: impl Into<String>, v: f64) -> Result<()> {
        self.push(name, vec![], vec![v])
    }

    pub fn push_vector(&mut self, name: impl Into<String>, v: &[f64]) -> Result<()> {
        self.push(name, vec![v.len() as u64], v.to_vec())
    }

    pub fn push_matrix(&mut self, name: impl Into<String>, m: &DenseMatrix) -> Result<()> {
        self.push(name, vec![m.rows() as u64, m.cols() as u64], m.data().to_vec())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| RvaeError::format(format!("checkpoint has no tensor {name}")))
    }

    pub fn scalar(&self, name: &str) -> Result<f64> {
        let t = self.require(name)?;
        if t.data.len() != 1 {
            return Err(RvaeError::format(format!("tensor {name} is not a scalar")));
        }
        Ok(t.data[0])
    }

    pub fn vector(&self, name: &str) -> Result<Vec<f64>> {
        let t = self.require(name)?;
        if t.dims.len() != 1 {
            return Err(RvaeError::format(format!("tensor {name} is not a vector")));
        }
        Ok(t.data.clone())
    }

    pub fn matrix(&self, name: &str) -> Result<DenseMatrix> {
        let t = self.require(name)?;
        if t.dims.len() != 2 {
            return Err(RvaeError::format(format!("tensor {name} is not a matrix")));
        }
        DenseMatrix::from_vec(t.dims[0] as usize, t.dims[1] as usize, t.data.clone())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.extend_from_slice(&(t.dims.len() as u32).to_le_bytes());
            for d in &t.dims {
                out.extend_from_slice(&d.to_le_bytes());
            }
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(RvaeError::format("not a checkpoint: bad magic"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(RvaeError::format(format!(
                "unsupported checkpoint version {version}, expected {VERSION}"
            )));
        }
        let count = r.u32()?;
        let mut ck = Checkpoint::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| RvaeError::format("tensor name is not UTF-8"))?
                .to_string();
            let rank = r.u32()? as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(r.u64()?);
            }
            let n = dims
                .iter()
                .try_fold(1u64, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| RvaeError::format(format!("tensor {name} is too large")))?;
            let payload = r.take(
                usize::try_from(n)
                    .ok()
                    .and_then(|n| n.checked_mul(8))
                    .ok_or_else(|| RvaeError::format(format!("tensor {name} is too large")))?,
            )?;
            let data = payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
                .collect();
            ck.push(name, dims, data)
                .map_err(|e| RvaeError::format(e.to_string()))?;
        }
        if r.pos != bytes.len() {
            return Err(RvaeError::format("trailing bytes after last tensor"));
        }
        Ok(ck)
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

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            io::Error::new(io::ErrorKind::UnexpectedEof, "checkpoint is truncated")
        })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}
