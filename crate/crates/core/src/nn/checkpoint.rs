//! Flat parameter checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      8 bytes  "ECBCKPT1"
//! header     u32 length + UTF-8 JSON (geometry, architectures, seed, metadata)
//! count      u32
//! per entry  u32 name length, name bytes, u32 rank, rank x u32 extents,
//!            product(extents) x f64 values
//! ```

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Arch, Geometry};
use crate::autodiff::{Parameter, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"ECBCKPT1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub geometry: Geometry,
    pub archs: Vec<Arch>,
    pub seed: u64,
    #[serde(default)]
    pub meta: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn from_params<'a>(header: CheckpointHeader, params: impl IntoIterator<Item = &'a Parameter>) -> Self {
        let params = params.into_iter().map(|p| (p.name().to_string(), p.value.clone())).collect();
        Checkpoint { header, params }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Copy stored values into `params`, which must match by name and shape.
    pub fn restore<'a>(&self, params: impl IntoIterator<Item = &'a mut Parameter>) -> Result<()> {
        let stored: BTreeMap<&str, &Tensor> = self.params.iter().map(|(n, t)| (n.as_str(), t)).collect();
        let mut seen = 0;
        for p in params {
            let t = stored
                .get(p.name())
                .ok_or_else(|| Error::Format(format!("checkpoint has no parameter {}", p.name())))?;
            if t.shape() != p.shape() {
                return Err(Error::Dimension(format!(
                    "checkpoint parameter {} has shape {:?}, model expects {:?}",
                    p.name(),
                    t.shape(),
                    p.shape()
                )));
            }
            p.value = (*t).clone();
            seen += 1;
        }
        if seen != stored.len() {
            return Err(Error::Format(format!("checkpoint holds {} parameters, model has {seen}", stored.len())));
        }
        Ok(())
    }

    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        let header = serde_json::to_vec(&self.header).map_err(std::io::Error::other)?;
        write_u32(w, header.len())?;
        w.write_all(&header)?;
        write_u32(w, self.params.len())?;
        for (name, t) in &self.params {
            write_u32(w, name.len())?;
            w.write_all(name.as_bytes())?;
            write_u32(w, t.shape().len())?;
            for &d in t.shape() {
                write_u32(w, d)?;
            }
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        read_exact(r, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("not a checkpoint file (bad magic)".into()));
        }
        let len = read_u32(r)?;
        let mut header = vec![0u8; len];
        read_exact(r, &mut header)?;
        let header: CheckpointHeader =
            serde_json::from_slice(&header).map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
        let count = read_u32(r)?;
        let mut params = Vec::with_capacity(count);
        for _ in 0..count {
            let mut name = vec![0u8; read_u32(r)?];
            read_exact(r, &mut name)?;
            let name = String::from_utf8(name).map_err(|_| Error::Format("parameter name is not UTF-8".into()))?;
            let rank = read_u32(r)?;
            let shape = (0..rank).map(|_| read_u32(r)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let mut raw = vec![0u8; n * 8];
            read_exact(r, &mut raw)?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            params.push((name, Tensor::new(shape, data)?));
        }
        Ok(Checkpoint { header, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        self.write_to(&mut w).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::read_from(&mut std::io::BufReader::new(file))
    }
}

pub(crate) fn write_u32(w: &mut impl Write, v: usize) -> std::io::Result<()> {
    let v = u32::try_from(v).map_err(std::io::Error::other)?;
    w.write_all(&v.to_le_bytes())
}

pub(crate) fn read_exact(r: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| Error::Format(format!("truncated file: {e}")))
}

pub(crate) fn read_u32(r: &mut impl Read) -> Result<usize> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b) as usize)
}
