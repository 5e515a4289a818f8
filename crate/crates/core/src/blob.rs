//! Flat little-endian `f32` blobs used by dataset and checkpoint files.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{PtaError, Result};
use crate::params::hex_string;

pub fn f32_to_bytes(data: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(data.len() * 4);
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn bytes_to_f32(bytes: &[u8]) -> Result<Vec<f32>> {
    if bytes.len() % 4 != 0 {
        return Err(PtaError::CorruptArtifact(format!(
            "blob length {} is not a multiple of 4",
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

pub fn write_f32_blob(path: &Path, data: &[f32]) -> Result<()> {
    fs::write(path, f32_to_bytes(data))?;
    Ok(())
}

pub fn read_f32_blob(path: &Path) -> Result<Vec<f32>> {
    bytes_to_f32(&fs::read(path)?)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex_string(&Sha256::digest(bytes))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn f32_round_trip_is_exact() {
        let data = vec![0.0f32, -1.5, 3.25e-7, f32::MAX, f32::MIN_POSITIVE];
        let back = bytes_to_f32(&f32_to_bytes(&data)).unwrap();
        assert_eq!(back, data);
    }

    #[test]
    fn truncated_blob_is_rejected() {
        assert!(bytes_to_f32(&[0, 1, 2]).is_err());
    }

    #[test]
    fn sha256_known_answer() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}
