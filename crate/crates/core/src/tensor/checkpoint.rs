//! Binary tensor container.
//!
//! Layout: 8-byte format tag, `u32` version, `u64` header length, a UTF-8
//! JSON header (named-tensor manifest with shapes and dtypes, plus free-form
//! metadata), then every array in manifest order as little-endian values.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MRECTNSR";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
    U64,
}

impl Dtype {
    fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 | Dtype::U64 => 8,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    dtype: Dtype,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    tensors: Vec<ManifestEntry>,
    meta: serde_json::Value,
}

/// Named tensors plus arbitrary JSON metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointData {
    pub tensors: Vec<(String, Dtype, Tensor)>,
    pub meta: serde_json::Value,
}

impl CheckpointData {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _, _)| n == name).map(|(_, _, t)| t)
    }
}

pub fn write_checkpoint(path: &Path, data: &CheckpointData) -> Result<()> {
    let header = Header {
        tensors: data
            .tensors
            .iter()
            .map(|(name, dtype, t)| ManifestEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                dtype: *dtype,
            })
            .collect(),
        meta: data.meta.clone(),
    };
    let header_bytes = serde_json::to_vec(&header).map_err(|e| Error::Format(format!("header: {e}")))?;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut write = |bytes: &[u8]| w.write_all(bytes).map_err(|e| Error::io(path, e));
    write(CHECKPOINT_MAGIC)?;
    write(&VERSION.to_le_bytes())?;
    write(&(header_bytes.len() as u64).to_le_bytes())?;
    write(&header_bytes)?;
    for (name, dtype, t) in &data.tensors {
        for &v in t.data() {
            match dtype {
                Dtype::F32 => write(&(v as f32).to_le_bytes())?,
                Dtype::F64 => write(&v.to_le_bytes())?,
                Dtype::U64 => {
                    if v < 0.0 || v.fract() != 0.0 || v > (1u64 << 53) as f64 {
                        return Err(Error::Format(format!("{name}: {v} is not a valid u64")));
                    }
                    write(&(v as u64).to_le_bytes())?
                }
            }
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<CheckpointData> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut read = |buf: &mut [u8]| r.read_exact(buf).map_err(|e| Error::io(path, e));
    let mut magic = [0u8; 8];
    read(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Format(format!("{}: bad format tag", path.display())));
    }
    let mut b4 = [0u8; 4];
    read(&mut b4)?;
    let version = u32::from_le_bytes(b4);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let mut b8 = [0u8; 8];
    read(&mut b8)?;
    let hlen = u64::from_le_bytes(b8) as usize;
    let mut hbuf = vec![0u8; hlen];
    read(&mut hbuf)?;
    let header: Header = serde_json::from_slice(&hbuf).map_err(|e| Error::Format(format!("header: {e}")))?;
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for entry in header.tensors {
        let n: usize = entry.shape.iter().product();
        let mut raw = vec![0u8; n * entry.dtype.width()];
        read(&mut raw)?;
        let values: Vec<f64> = match entry.dtype {
            Dtype::F32 => raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
            Dtype::F64 => raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
            Dtype::U64 => raw
                .chunks_exact(8)
                .map(|c| u64::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
        };
        tensors.push((entry.name, entry.dtype, Tensor::new(entry.shape, values)?));
    }
    Ok(CheckpointData {
        tensors,
        meta: header.meta,
    })
}
