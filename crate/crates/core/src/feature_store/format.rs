//! Binary feature-map container.
//!
//! Layout, all integers little-endian:
//! `"MAFR" | version u32 = 1 | modality u8 | H u32 | W u32 | D u32 | H·W·D f32 | H·W validity bytes`.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array2, Array3};

use super::{FeatureMap, Mask, Modality};
use crate::error::{MafrError, Result};

pub const MAGIC: &[u8; 4] = b"MAFR";
pub const VERSION: u32 = 1;

const HEADER_LEN: usize = 4 + 4 + 1 + 4 + 4 + 4;

/// Serializes `map` into `out`.
pub fn write_feature_map<W: Write>(map: &FeatureMap, out: &mut W) -> std::io::Result<()> {
    let (h, w, d) = map.data().dim();
    let mut buf = Vec::with_capacity(HEADER_LEN + h * w * d * 4 + h * w);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.push(map.modality().tag());
    for dim in [h, w, d] {
        let dim = u32::try_from(dim).map_err(|_| {
            std::io::Error::new(std::io::ErrorKind::InvalidInput, "dimension exceeds u32")
        })?;
        buf.extend_from_slice(&dim.to_le_bytes());
    }
    for v in map.data().iter() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf.extend(map.validity().iter().map(|&v| v as u8));
    out.write_all(&buf)
}

/// Parses a container from raw bytes.
pub fn read_feature_map(bytes: &[u8]) -> Result<FeatureMap> {
    let fmt = |m: &str| MafrError::Format(m.to_string());
    if bytes.len() < HEADER_LEN {
        return Err(fmt("truncated header"));
    }
    if &bytes[0..4] != MAGIC {
        return Err(fmt("bad magic bytes"));
    }
    let u32_at = |off: usize| u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
    let version = u32_at(4);
    if version != VERSION {
        return Err(MafrError::Format(format!("unsupported version {version}")));
    }
    let modality = Modality::from_tag(bytes[8])
        .ok_or_else(|| MafrError::Format(format!("unknown modality tag {}", bytes[8])))?;
    let (h, w, d) = (u32_at(9) as usize, u32_at(13) as usize, u32_at(17) as usize);
    if h == 0 || w == 0 || d == 0 {
        return Err(fmt("zero dimension"));
    }
    let pixels = h.checked_mul(w).ok_or_else(|| fmt("dimension overflow"))?;
    let payload = pixels
        .checked_mul(d)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| fmt("dimension overflow"))?;
    let expected = payload
        .checked_add(pixels)
        .and_then(|n| n.checked_add(HEADER_LEN))
        .ok_or_else(|| fmt("dimension overflow"))?;
    if bytes.len() != expected {
        return Err(MafrError::Format(format!(
            "expected {expected} bytes for {h}x{w}x{d}, found {}",
            bytes.len()
        )));
    }

    let body = &bytes[HEADER_LEN..HEADER_LEN + payload];
    let mut values = Vec::with_capacity(pixels * d);
    for chunk in body.chunks_exact(4) {
        let v = f32::from_le_bytes(chunk.try_into().unwrap());
        if !v.is_finite() {
            return Err(fmt("non-finite payload value"));
        }
        values.push(v);
    }
    let mut validity = Vec::with_capacity(pixels);
    for &b in &bytes[HEADER_LEN + payload..] {
        match b {
            0 => validity.push(false),
            1 => validity.push(true),
            other => return Err(MafrError::Format(format!("validity byte {other} is not 0/1"))),
        }
    }
    let data = Array3::from_shape_vec((h, w, d), values).expect("length checked");
    let mask: Mask = Array2::from_shape_vec((h, w), validity).expect("length checked");
    FeatureMap::new(modality, data, mask).map_err(|e| MafrError::Format(e.to_string()))
}

pub fn save_feature_map(map: &FeatureMap, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut file = fs::File::create(path).map_err(|e| MafrError::io(path, e))?;
    write_feature_map(map, &mut file).map_err(|e| MafrError::io(path, e))?;
    file.flush().map_err(|e| MafrError::io(path, e))
}

pub fn load_feature_map(path: impl AsRef<Path>) -> Result<FeatureMap> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| MafrError::io(path, e))?;
    read_feature_map(&bytes)
}
