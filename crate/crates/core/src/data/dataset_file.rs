//! PXFD: magic, version, dims, class names, seed, f32 pixels, u16 labels.

use std::path::Path;

use super::codec::{Reader, Writer};
use super::Dataset;
use crate::error::{Error, Result};
use crate::image::Image;

const MAGIC: &[u8; 4] = b"PXFD";
const VERSION: u32 = 1;

/// Pixels are stored as 32-bit floats; values not representable in f32 are rounded.
pub fn encode_dataset(ds: &Dataset) -> Vec<u8> {
    let (c, h, w) = ds.dims().unwrap_or((0, 0, 0));
    let mut out = Writer::default();
    out.bytes(MAGIC);
    out.u32(VERSION);
    out.usize(ds.len());
    out.u32(c as u32);
    out.u32(h as u32);
    out.u32(w as u32);
    out.u64(ds.seed());
    out.u32(ds.num_classes() as u32);
    for name in ds.class_names() {
        out.str(name);
    }
    for img in ds.images() {
        for &v in img.values() {
            out.f32(v as f32);
        }
    }
    for &l in ds.labels() {
        out.u16(l as u16);
    }
    out.buf
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Dataset> {
    let mut r = Reader::new(bytes);
    r.header(MAGIC, VERSION)?;
    let n = r.usize("item count")?;
    let c = r.u32("channels")? as usize;
    let h = r.u32("height")? as usize;
    let w = r.u32("width")? as usize;
    let seed = r.u64("seed")?;
    let k = r.u32("class count")? as usize;
    let names = (0..k).map(|_| r.str("class name")).collect::<Result<Vec<_>>>()?;

    let per = c
        .checked_mul(h)
        .and_then(|v| v.checked_mul(w))
        .ok_or_else(|| Error::Format("image dims overflow".into()))?;
    if n > 0 && per == 0 {
        return Err(Error::Format("zero-sized image dims".into()));
    }
    let mut images = Vec::with_capacity(n.min(bytes.len()));
    for _ in 0..n {
        let raw = r.take(per * 4, "pixels")?;
        let values = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
            .collect();
        images.push(Image::new(c, h, w, values).map_err(|e| Error::Format(e.to_string()))?);
    }
    let labels = (0..n).map(|_| r.u16("labels").map(usize::from)).collect::<Result<Vec<_>>>()?;
    r.finish()?;
    Dataset::new(images, labels, names, seed).map_err(|e| Error::Format(e.to_string()))
}

pub fn save_dataset(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, encode_dataset(ds))?;
    Ok(())
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    decode_dataset(&std::fs::read(path)?)
}
