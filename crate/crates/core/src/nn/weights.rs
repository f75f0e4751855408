//! Binary weight container plus a JSON manifest alongside it.
//!
//! Binary layout (little endian): magic `SIJW`, `u32` version, `u32` tensor
//! count, then per tensor: `u32` name length, UTF-8 name, `u32` rank, `u32`
//! dims, `f32` values.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::write_atomic;

const MAGIC: &[u8; 4] = b"SIJW";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightManifest {
    pub format_version: u32,
    pub kind: String,
    pub config: serde_json::Value,
    pub tensors: Vec<(String, Vec<usize>)>,
}

pub fn manifest_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

pub fn write_weights(
    path: &Path,
    kind: &str,
    config: serde_json::Value,
    tensors: &[NamedTensor],
) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in tensors {
        debug_assert_eq!(t.shape.iter().product::<usize>(), t.values.len());
        buf.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
        buf.extend_from_slice(t.name.as_bytes());
        buf.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
        for &d in &t.shape {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in &t.values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = WeightManifest {
        format_version: VERSION,
        kind: kind.to_string(),
        config,
        tensors: tensors.iter().map(|t| (t.name.clone(), t.shape.clone())).collect(),
    };
    let json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    write_atomic(path, &buf)?;
    write_atomic(&manifest_path(path), &json)
}

struct Reader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::format(self.path, "truncated weight file"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn read_weights(path: &Path) -> Result<(WeightManifest, Vec<NamedTensor>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mpath = manifest_path(path);
    let mbytes = std::fs::read(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: WeightManifest =
        serde_json::from_slice(&mbytes).map_err(|e| Error::format(&mpath, e.to_string()))?;
    let mut r = Reader {
        path,
        bytes: &bytes,
        pos: 0,
    };
    if r.take(4)? != MAGIC {
        return Err(Error::format(path, "not a weight file"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::format(path, format!("unsupported weight version {version}")));
    }
    let count = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|_| Error::format(path, "tensor name is not UTF-8"))?;
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let values = r
            .take(n * 4)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        tensors.push(NamedTensor { name, shape, values });
    }
    if r.pos != bytes.len() {
        return Err(Error::format(path, "trailing bytes in weight file"));
    }
    let listed: Vec<(String, Vec<usize>)> =
        tensors.iter().map(|t| (t.name.clone(), t.shape.clone())).collect();
    if listed != manifest.tensors {
        return Err(Error::format(&mpath, "manifest does not match weight file"));
    }
    Ok((manifest, tensors))
}
