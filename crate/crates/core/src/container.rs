// SPDX-License-Identifier: MIT OR Apache-2.0

//! Versioned little-endian tensor container shared by every checkpoint kind.
//!
//! ```text
//! magic[4] | version u32 | meta_len u32 | meta (UTF-8 JSON) | n_tensors u32 |
//!   per tensor: name_len u32 | name | dtype u8 (0=f32, 1=f64) | ndim u32 |
//!               dims u64* | payload
//! ```
//!
//! Activation matrices use a separate flat layout:
//!
//! ```text
//! "ACTV" | rows u64 | cols u64 | layer u64 | rows*cols f32
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{NspuError, Result};

pub const VERSION: u32 = 1;
pub const MAGIC_LM: [u8; 4] = *b"NSPU";
pub const MAGIC_PROJECTOR: [u8; 4] = *b"PROJ";
pub const MAGIC_SUBSPACE: [u8; 4] = *b"FSUB";
pub const MAGIC_ACTIVATIONS: [u8; 4] = *b"ACTV";

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl TensorData {
    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn into_f64(self) -> Vec<f64> {
        match self {
            TensorData::F32(v) => v.into_iter().map(f64::from).collect(),
            TensorData::F64(v) => v,
        }
    }

    pub fn into_f32(self) -> Vec<f32> {
        match self {
            TensorData::F32(v) => v,
            TensorData::F64(v) => v.into_iter().map(|x| x as f32).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: TensorData,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub magic: [u8; 4],
    pub meta: serde_json::Value,
    pub tensors: Vec<Tensor>,
}

impl Container {
    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| NspuError::Checkpoint(format!("missing tensor {name}")))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(&self.magic);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let meta = serde_json::to_vec(&self.meta)?;
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            let expected: usize = t.shape.iter().product();
            if expected != t.data.len() {
                return Err(NspuError::Checkpoint(format!(
                    "tensor {} has {} values for shape {:?}",
                    t.name,
                    t.data.len(),
                    t.shape
                )));
            }
            out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            match &t.data {
                TensorData::F32(_) => out.push(0),
                TensorData::F64(_) => out.push(1),
            }
            out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
            for &d in &t.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            match &t.data {
                TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                TensorData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], magic: [u8; 4]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let found = r.take(4)?;
        if found != magic {
            return Err(NspuError::Checkpoint(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(found),
                String::from_utf8_lossy(&magic)
            )));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(NspuError::Checkpoint(format!(
                "unsupported version {version}"
            )));
        }
        let meta_len = r.u32()? as usize;
        let meta = serde_json::from_slice(r.take(meta_len)?)?;
        let n = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(n);
        for _ in 0..n {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| NspuError::Checkpoint("tensor name is not UTF-8".into()))?;
            let dtype = r.take(1)?[0];
            let ndim = r.u32()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u64()? as usize);
            }
            let count: usize = shape.iter().product();
            let data = match dtype {
                0 => TensorData::F32(
                    r.take(count * 4)?
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                        .collect(),
                ),
                1 => TensorData::F64(
                    r.take(count * 8)?
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                        .collect(),
                ),
                other => {
                    return Err(NspuError::Checkpoint(format!("unknown dtype tag {other}")))
                }
            };
            tensors.push(Tensor { name, shape, data });
        }
        if r.pos != bytes.len() {
            return Err(NspuError::Checkpoint("trailing bytes after tensors".into()));
        }
        Ok(Self {
            magic,
            meta,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        write_file(path, &bytes)
    }

    pub fn load(path: &Path, magic: [u8; 4]) -> Result<Self> {
        let bytes = read_file(path)?;
        Self::from_bytes(&bytes, magic)
    }
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
            .ok_or_else(|| NspuError::Checkpoint("truncated file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| NspuError::io(parent, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| NspuError::io(path, e))?;
    f.write_all(bytes).map_err(|e| NspuError::io(path, e))
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    let mut f = fs::File::open(path).map_err(|e| NspuError::io(path, e))?;
    let mut out = Vec::new();
    f.read_to_end(&mut out).map_err(|e| NspuError::io(path, e))?;
    Ok(out)
}

/// Encodes an `ACTV` payload.
pub fn activations_to_bytes(rows: usize, cols: usize, layer: usize, data: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(28 + data.len() * 4);
    out.extend_from_slice(&MAGIC_ACTIVATIONS);
    for v in [rows, cols, layer] {
        out.extend_from_slice(&(v as u64).to_le_bytes());
    }
    for &x in data {
        out.extend_from_slice(&(x as f32).to_le_bytes());
    }
    out
}

/// Decodes an `ACTV` payload into `(rows, cols, layer, data)`.
pub fn activations_from_bytes(bytes: &[u8]) -> Result<(usize, usize, usize, Vec<f64>)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC_ACTIVATIONS {
        return Err(NspuError::Checkpoint("bad activation magic".into()));
    }
    let rows = r.u64()? as usize;
    let cols = r.u64()? as usize;
    let layer = r.u64()? as usize;
    let count = rows
        .checked_mul(cols)
        .ok_or_else(|| NspuError::Checkpoint("activation size overflow".into()))?;
    let data = r
        .take(count * 4)?
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
        .collect();
    if r.pos != bytes.len() {
        return Err(NspuError::Checkpoint("trailing bytes after activations".into()));
    }
    Ok((rows, cols, layer, data))
}
