//! Single-file dataset container and PGM previews.
//!
//! Layout, integers little-endian:
//!
//! ```text
//! magic      8 bytes "ECBDATA1"
//! header     u32 length + UTF-8 JSON of the generator spec
//! samples    n_source source samples, then n_target target samples, each
//!            u32 label + channels*side*side f64 values
//! ```
//!
//! The target split is stored whole; k-shot splitting happens at load time.

use std::io::{Read, Write};
use std::path::Path;

use super::{Domain, GenSpec, GeneratedPair, Sample};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::nn::checkpoint::{read_exact, read_u32, write_u32};

pub const DATA_MAGIC: &[u8; 8] = b"ECBDATA1";

impl GeneratedPair {
    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(DATA_MAGIC)?;
        let header = serde_json::to_vec(&self.spec).map_err(std::io::Error::other)?;
        write_u32(w, header.len())?;
        w.write_all(&header)?;
        for s in self.source.iter().chain(&self.target) {
            write_u32(w, s.label)?;
            for v in s.image.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        read_exact(r, &mut magic)?;
        if &magic != DATA_MAGIC {
            return Err(Error::Format("not a dataset file (bad magic)".into()));
        }
        let mut header = vec![0u8; read_u32(r)?];
        read_exact(r, &mut header)?;
        let spec: GenSpec =
            serde_json::from_slice(&header).map_err(|e| Error::Format(format!("dataset header: {e}")))?;
        let numel = spec.channels * spec.side * spec.side;
        let mut read_split = |n: usize, domain: Domain| -> Result<Vec<Sample>> {
            let mut raw = vec![0u8; numel * 8];
            (0..n)
                .map(|_| {
                    let label = read_u32(r)?;
                    if label >= spec.classes {
                        return Err(Error::Format(format!("stored label {label} outside {} classes", spec.classes)));
                    }
                    read_exact(r, &mut raw)?;
                    let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
                    let image = Tensor::new(vec![spec.channels, spec.side, spec.side], data)?;
                    Ok(Sample { image, label, domain })
                })
                .collect()
        };
        let source = read_split(spec.n_source, Domain::Source)?;
        let target = read_split(spec.n_target, Domain::Target)?;
        let mut rest = [0u8; 1];
        if r.read(&mut rest).map_err(|e| Error::Format(e.to_string()))? != 0 {
            return Err(Error::Format("trailing bytes after the last sample".into()));
        }
        Ok(GeneratedPair { spec, source, target })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        self.write_to(&mut w).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        GeneratedPair::read_from(&mut std::io::BufReader::new(file))
    }
}

/// Write the first channel of `images` as an 8-bit PGM contact sheet with
/// `cols` images per row and a one-pixel gutter.
pub fn write_pgm(path: &Path, images: &[&Tensor], cols: usize) -> Result<()> {
    let first = images.first().ok_or_else(|| Error::Contract("no images to preview".into()))?;
    let (h, w) = match first.shape() {
        [_, h, w] => (*h, *w),
        s => return Err(Error::Dimension(format!("preview expects [c, h, w] images, got {s:?}"))),
    };
    let cols = cols.clamp(1, images.len());
    let rows = images.len().div_ceil(cols);
    let (width, height) = (cols * (w + 1) - 1, rows * (h + 1) - 1);
    let mut pixels = vec![0u8; width * height];
    for (n, img) in images.iter().enumerate() {
        if img.shape() != first.shape() {
            return Err(Error::Dimension("preview images differ in shape".into()));
        }
        let (oy, ox) = ((n / cols) * (h + 1), (n % cols) * (w + 1));
        for i in 0..h {
            for j in 0..w {
                let v = img.data()[i * w + j].clamp(0.0, 1.0);
                pixels[(oy + i) * width + ox + j] = (v * 255.0).round() as u8;
            }
        }
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(&pixels);
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}
