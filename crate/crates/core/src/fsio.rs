//! Whole-file atomic writes and content digests shared by every on-disk
//! format.

use std::io::Write;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Writes `bytes` to a temporary file next to `path`, then renames it into
/// place, so readers never observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Reads a file and checks its length and digest against a manifest entry.
pub fn read_verified(path: &Path, expected_len: u64, expected_sha256: &str) -> Result<Vec<u8>> {
    let bytes = std::fs::read(path)?;
    if bytes.len() as u64 != expected_len {
        return Err(Error::Corrupt(format!(
            "{}: {} bytes, manifest says {expected_len}",
            path.display(),
            bytes.len()
        )));
    }
    let got = sha256_hex(&bytes);
    if got != expected_sha256 {
        return Err(Error::Corrupt(format!(
            "{}: checksum {got} does not match manifest {expected_sha256}",
            path.display()
        )));
    }
    Ok(bytes)
}

pub fn f32s_to_le_bytes(values: &[f32]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn le_bytes_to_f32s(bytes: &[u8]) -> Result<Vec<f32>> {
    if bytes.len() % 4 != 0 {
        return Err(Error::Corrupt(format!("float blob of {} bytes is not a multiple of 4", bytes.len())));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}
