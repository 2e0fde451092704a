//! Binary dataset layout, little-endian throughout:
//!
//! ```text
//! magic "KTDS" | version u32 | K u32 | M u64 | C u32 | H u32 | W u32
//! | precision u8 (1 = f32, 2 = f64) | split u8 (0 = train, 1 = test)
//! | M labels as u32 | M·C·H·W pixels at the stored precision
//! ```

use std::fs;
use std::path::Path;

use super::{Dataset, Provenance, Split};
use crate::error::{Error, Result};
use crate::tensor::{Precision, Real, Tensor};

pub const DATASET_MAGIC: [u8; 4] = *b"KTDS";
pub const DATASET_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 4 + 8 + 4 + 4 + 4 + 1 + 1;

pub fn encode_dataset<T: Real>(ds: &Dataset<T>) -> Vec<u8> {
    let [c, h, w] = ds.image_shape();
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * ds.len() + ds.images().numel() * 8);
    out.extend_from_slice(&DATASET_MAGIC);
    out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    out.extend_from_slice(&(ds.classes() as u32).to_le_bytes());
    out.extend_from_slice(&(ds.len() as u64).to_le_bytes());
    for d in [c, h, w] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.push(T::PRECISION.tag());
    out.push(ds.split.tag());
    for &l in ds.labels() {
        out.extend_from_slice(&(l as u32).to_le_bytes());
    }
    for &v in ds.images().data() {
        v.write_le(&mut out);
    }
    out
}

fn u32_at(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(b[at..at + 4].try_into().unwrap())
}

/// Parses a dataset. Pixels stored at the other precision are converted.
pub fn decode_dataset<T: Real>(bytes: &[u8], provenance: Provenance) -> Result<Dataset<T>> {
    if bytes.len() < 4 || bytes[..4] != DATASET_MAGIC {
        return Err(Error::Format("not a dataset file: bad magic bytes".into()));
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::Truncated {
            what: "dataset header",
            expected: HEADER_LEN,
            actual: bytes.len(),
        });
    }
    let version = u32_at(bytes, 4);
    if version != DATASET_VERSION {
        return Err(Error::Format(format!(
            "dataset format version {version}, expected {DATASET_VERSION}"
        )));
    }
    let classes = u32_at(bytes, 8) as usize;
    let m = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let (c, h, w) = (u32_at(bytes, 20) as usize, u32_at(bytes, 24) as usize, u32_at(bytes, 28) as usize);
    let precision = Precision::from_tag(bytes[32])
        .ok_or_else(|| Error::Format(format!("unknown precision tag {}", bytes[32])))?;
    let split = Split::from_tag(bytes[33]).ok_or_else(|| Error::Format(format!("unknown split tag {}", bytes[33])))?;

    let pixels = m
        .checked_mul(c)
        .and_then(|v| v.checked_mul(h))
        .and_then(|v| v.checked_mul(w))
        .ok_or_else(|| Error::Format("header dimensions overflow".into()))?;
    let labels_end = HEADER_LEN + 4 * m;
    let expected = labels_end + pixels * precision.byte_width();
    if bytes.len() < expected {
        let what = if bytes.len() < labels_end { "label block" } else { "image block" };
        return Err(Error::Truncated {
            what,
            expected,
            actual: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(Error::Format(format!(
            "{} trailing bytes after image block",
            bytes.len() - expected
        )));
    }

    let labels = (0..m).map(|i| u32_at(bytes, HEADER_LEN + 4 * i) as usize).collect();
    let width = precision.byte_width();
    let data = bytes[labels_end..]
        .chunks_exact(width)
        .map(|chunk| match precision {
            Precision::Single => T::from_f64_lossy(f32::read_le(chunk) as f64),
            Precision::Double => T::from_f64_lossy(f64::read_le(chunk)),
        })
        .collect();
    let images = Tensor::from_vec([m, c, h, w], data)?;
    Dataset::new(images, labels, classes, split, provenance)
}

pub fn save_dataset<T: Real>(ds: &Dataset<T>, path: &Path) -> Result<()> {
    fs::write(path, encode_dataset(ds))?;
    Ok(())
}

pub fn load_dataset<T: Real>(path: &Path) -> Result<Dataset<T>> {
    let bytes = fs::read(path)?;
    decode_dataset(&bytes, Provenance::File(path.to_path_buf()))
}
