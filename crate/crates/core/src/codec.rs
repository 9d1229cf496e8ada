//! Hex encoding of little-endian float arrays used by the dataset,
//! checkpoint, and attention-map files.

use crate::error::{Error, Result};

pub fn encode_f32(values: &[f32]) -> String {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    hex::encode(bytes)
}

pub fn decode_f32(text: &str) -> Result<Vec<f32>> {
    let bytes = hex::decode(text).map_err(|e| Error::format("f32 hex block", e.to_string()))?;
    if bytes.len() % 4 != 0 {
        return Err(Error::format("f32 hex block", format!("{} bytes is not a multiple of 4", bytes.len())));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

pub fn encode_f64(values: &[f64]) -> String {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    hex::encode(bytes)
}

pub fn decode_f64(text: &str) -> Result<Vec<f64>> {
    let bytes = hex::decode(text).map_err(|e| Error::format("f64 hex block", e.to_string()))?;
    if bytes.len() % 8 != 0 {
        return Err(Error::format("f64 hex block", format!("{} bytes is not a multiple of 8", bytes.len())));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect())
}

/// FNV-1a over the bit patterns of a sequence of floats.
pub fn fingerprint<'a>(blocks: impl IntoIterator<Item = &'a [f64]>) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for block in blocks {
        for v in block {
            for b in v.to_bits().to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
    }
    h
}
