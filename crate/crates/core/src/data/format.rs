//! Binary feature-file format.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! offset  size  field
//! 0       4     magic "TADF"
//! 4       2     u16 version (= 1)
//! 6       4     u32 T
//! 10      4     u32 D
//! 14      8     f64 delta_seconds
//! 22      8     f64 duration_seconds
//! 30      4*T*D f32 values, row-major
//! 30+4TD  4     u32 CRC-32 of all preceding bytes
//! ```
//!
//! The trailing checksum makes any truncation or bit corruption detectable;
//! the reader rejects rather than returning silently wrong features.

use std::fs;
use std::path::Path;

use crate::data::FeatureSequence;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"TADF";
const VERSION: u16 = 1;
const HEADER_LEN: usize = 30;

pub fn write_feature_file(path: &Path, seq: &FeatureSequence) -> Result<()> {
    seq.validate()?;
    let t = seq.t_len();
    let d = seq.dim();
    let mut bytes = Vec::with_capacity(HEADER_LEN + 4 * t * d + 4);
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&VERSION.to_le_bytes());
    bytes.extend_from_slice(&(t as u32).to_le_bytes());
    bytes.extend_from_slice(&(d as u32).to_le_bytes());
    bytes.extend_from_slice(&seq.delta_seconds.to_le_bytes());
    bytes.extend_from_slice(&seq.duration_seconds.to_le_bytes());
    for v in seq.values.data() {
        bytes.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    let crc = crc32fast::hash(&bytes);
    bytes.extend_from_slice(&crc.to_le_bytes());
    fs::write(path, bytes)?;
    Ok(())
}

pub fn read_feature_file(path: &Path, video_id: &str) -> Result<FeatureSequence> {
    let bytes = fs::read(path)?;
    parse_feature_bytes(&bytes, video_id)
}

/// Parse a feature file image. Every malformation is a [`Error::Format`] with
/// the offending byte offset; this function must never panic on hostile input.
pub fn parse_feature_bytes(bytes: &[u8], video_id: &str) -> Result<FeatureSequence> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::format(bytes.len(), "truncated header"));
    }
    if &bytes[0..4] != MAGIC {
        return Err(Error::format(0, "bad magic (expected TADF)"));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(Error::format(4, format!("unsupported version {version}")));
    }
    let t = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
    let d = u32::from_le_bytes(bytes[10..14].try_into().unwrap()) as usize;
    if t == 0 {
        return Err(Error::format(6, "T must be >= 1"));
    }
    if d == 0 {
        return Err(Error::format(10, "D must be >= 1"));
    }
    let delta = f64::from_le_bytes(bytes[14..22].try_into().unwrap());
    if !delta.is_finite() || delta <= 0.0 {
        return Err(Error::format(
            14,
            "delta_seconds must be positive and finite",
        ));
    }
    let duration = f64::from_le_bytes(bytes[22..30].try_into().unwrap());
    if !duration.is_finite() || duration <= 0.0 {
        return Err(Error::format(22, "duration must be positive and finite"));
    }
    if t as f64 * delta > duration + delta {
        return Err(Error::format(22, "duration inconsistent with T * delta"));
    }
    let payload = t
        .checked_mul(d)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::format(6, "T * D overflows"))?;
    let expected = HEADER_LEN + payload + 4;
    if bytes.len() != expected {
        return Err(Error::format(
            bytes.len().min(expected),
            format!(
                "file length {} vs expected {expected} for T={t} D={d}",
                bytes.len()
            ),
        ));
    }
    let crc_offset = HEADER_LEN + payload;
    let stored = u32::from_le_bytes(bytes[crc_offset..crc_offset + 4].try_into().unwrap());
    let actual = crc32fast::hash(&bytes[..crc_offset]);
    if stored != actual {
        return Err(Error::format(crc_offset, "checksum mismatch"));
    }
    let mut data = Vec::with_capacity(t * d);
    for i in 0..t * d {
        let off = HEADER_LEN + 4 * i;
        let v = f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
        if !v.is_finite() {
            return Err(Error::format(off, "non-finite feature value"));
        }
        data.push(v as f64);
    }
    let values = crate::autodiff::Tensor::new(vec![t, d], data)
        .map_err(|_| Error::format(HEADER_LEN, "payload shape"))?;
    Ok(FeatureSequence {
        video_id: video_id.to_string(),
        values,
        delta_seconds: delta,
        duration_seconds: duration,
    })
}
